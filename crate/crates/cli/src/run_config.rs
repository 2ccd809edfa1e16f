//! Flat `key = value` run configuration.
//!
//! Keys are exactly the model and training field names. Blank lines and
//! lines starting with `#` are ignored; unknown or repeated keys are errors.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use tsvit::{TrainConfig, TsvitConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: TsvitConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: TsvitConfig::table3(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ParseError {}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    raw.parse().map_err(|e| format!("invalid value {raw:?} for {key}: {e}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |message: String| ParseError { line, message };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, val) = trimmed
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {trimmed:?}")))?;
            let (key, val) = (key.trim(), val.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key}")));
            }
            cfg.set(key, val).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<(), String> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "signal_len" => m.signal_len = value(key, raw)?,
            "channels" => m.channels = value(key, raw)?,
            "patch_len" => m.patch_len = value(key, raw)?,
            "embed_dim" => m.embed_dim = value(key, raw)?,
            "heads" => m.heads = value(key, raw)?,
            "blocks" => m.blocks = value(key, raw)?,
            "mlp_dim" => m.mlp_dim = value(key, raw)?,
            "num_classes" => m.num_classes = value(key, raw)?,
            "encoder_dropout" => m.encoder_dropout = value(key, raw)?,
            "embed_dropout" => m.embed_dropout = value(key, raw)?,
            "use_position_embedding" => m.use_position_embedding = value(key, raw)?,
            "use_post_embedding_dropout" => m.use_post_embedding_dropout = value(key, raw)?,
            "learning_rate" => t.learning_rate = value(key, raw)?,
            "batch_size" => t.batch_size = value(key, raw)?,
            "epochs" => t.epochs = value(key, raw)?,
            "seed" => t.seed = value(key, raw)?,
            "trials" => t.trials = value(key, raw)?,
            "beta1" => t.beta1 = value(key, raw)?,
            "beta2" => t.beta2 = value(key, raw)?,
            "adam_eps" => t.adam_eps = value(key, raw)?,
            "deterministic" => t.deterministic = value(key, raw)?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}
