use crate::error::{Error, Result};
use crate::tensor::check_probability;

/// Structural hyperparameters of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct TsvitConfig {
    /// Samples per signal window (L).
    pub signal_len: usize,
    /// Signal channels (C).
    pub channels: usize,
    /// Patch length, also the convolution width and stride (L_p).
    pub patch_len: usize,
    /// Token width (m).
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Hidden width of each block's perceptron (d_MLP).
    pub mlp_dim: usize,
    pub num_classes: usize,
    /// Dropout inside the encoder blocks and the classification head (d_e).
    pub encoder_dropout: f64,
    /// Dropout after the position embedding (d_p).
    pub embed_dropout: f64,
    pub use_position_embedding: bool,
    pub use_post_embedding_dropout: bool,
}

impl TsvitConfig {
    /// Reference configuration: 2048-sample single-channel windows, ten classes.
    pub fn table3() -> Self {
        Self {
            signal_len: 2048,
            channels: 1,
            patch_len: 32,
            embed_dim: 192,
            heads: 8,
            blocks: 8,
            mlp_dim: 768,
            num_classes: 10,
            encoder_dropout: 0.1,
            embed_dropout: 0.1,
            use_position_embedding: true,
            use_post_embedding_dropout: true,
        }
    }

    /// Patch count n.
    pub fn num_patches(&self) -> usize {
        self.signal_len / self.patch_len
    }

    /// Token count n + 1 (patches plus the class token).
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("signal_len", self.signal_len),
            ("channels", self.channels),
            ("patch_len", self.patch_len),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.signal_len.is_multiple_of(self.patch_len) {
            return Err(Error::Config(format!(
                "signal_len {} is not divisible by patch_len {}",
                self.signal_len, self.patch_len
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        check_probability("encoder_dropout", self.encoder_dropout)?;
        check_probability("embed_dropout", self.embed_dropout)?;
        Ok(())
    }

    /// Rejects data whose window geometry or class count differs.
    pub fn ensure_data_matches(&self, signal_len: usize, channels: usize, num_classes: usize) -> Result<()> {
        if (signal_len, channels, num_classes) != (self.signal_len, self.channels, self.num_classes) {
            return Err(Error::Config(format!(
                "data has L={signal_len}, C={channels}, N_c={num_classes} but the model expects \
                 L={}, C={}, N_c={}",
                self.signal_len, self.channels, self.num_classes
            )));
        }
        Ok(())
    }

    /// Same network with every dropout disabled.
    pub fn without_dropout(&self) -> Self {
        Self {
            encoder_dropout: 0.0,
            embed_dropout: 0.0,
            ..self.clone()
        }
    }
}
