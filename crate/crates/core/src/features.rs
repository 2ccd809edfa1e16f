//! Per-layer token features for offline visualization.
//!
//! Layer 0 is the embedding output averaged over all tokens (its class-token
//! row is the same for every input, so it carries no information). Layer `k`
//! for `k >= 1` is the class-token row after block `k`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, FormatError, Result};
use crate::io::{Reader, Writer};
use crate::model::{embed, encoder_forward, TsvitModel};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::train::batch_tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"TSVF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub sample_index: u32,
    pub label: u32,
    pub layer: u8,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub embed_dim: usize,
    pub blocks: usize,
    pub records: Vec<FeatureRecord>,
}

/// Inference-mode features of every sample, `blocks + 1` records per sample
/// ordered by sample then layer.
pub fn extract_features<T: Scalar>(model: &TsvitModel<T>, data: &Dataset, batch_size: usize) -> Result<FeatureFile> {
    let cfg = model.config();
    cfg.ensure_data_matches(data.signal_len(), data.channels(), data.num_classes())?;
    if cfg.blocks > u8::MAX as usize {
        return Err(Error::Config(format!("cannot export {} blocks, at most 255", cfg.blocks)));
    }
    let (m, s) = (cfg.embed_dim, cfg.seq_len());
    let mut rng = Rng::new(0);
    let mut records = Vec::with_capacity(data.len() * (cfg.blocks + 1));
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let x = batch_tensor::<T>(data, chunk);
        let (z0, _) = embed(&x, model.params(), cfg, &mut rng, false)?;
        let (_, outputs, _) = encoder_forward(&z0, model.params(), cfg, &mut rng, false)?;
        for (b, &i) in chunk.iter().enumerate() {
            let label = data.samples()[i].label as u32;
            let seq = &z0.data()[b * s * m..(b + 1) * s * m];
            let mut mean = vec![0.0f64; m];
            for tok in seq.chunks(m) {
                for (acc, v) in mean.iter_mut().zip(tok) {
                    *acc += v.as_f64();
                }
            }
            records.push(FeatureRecord {
                sample_index: i as u32,
                label,
                layer: 0,
                values: mean.iter().map(|v| (v / s as f64) as f32).collect(),
            });
            for (k, out) in outputs.iter().enumerate() {
                let row = &out.data()[b * s * m..b * s * m + m];
                records.push(FeatureRecord {
                    sample_index: i as u32,
                    label,
                    layer: (k + 1) as u8,
                    values: row.iter().map(|v| v.as_f32()).collect(),
                });
            }
        }
    }
    Ok(FeatureFile {
        embed_dim: m,
        blocks: cfg.blocks,
        records,
    })
}

pub fn export_features<T: Scalar>(model: &TsvitModel<T>, data: &Dataset, path: impl AsRef<Path>) -> Result<FeatureFile> {
    let features = extract_features(model, data, 32)?;
    write_features(&features, path)?;
    Ok(features)
}

pub fn write_features(features: &FeatureFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = Writer::new(&mut w);
    let mut body = || -> std::io::Result<()> {
        out.bytes(&FEATURE_MAGIC)?;
        out.u32(FEATURE_VERSION)?;
        out.u32(features.records.len() as u32)?;
        out.u32(features.embed_dim as u32)?;
        out.u32(features.blocks as u32)?;
        for r in &features.records {
            out.u32(r.sample_index)?;
            out.u32(r.label)?;
            out.u8(r.layer)?;
            out.f32s(&r.values)?;
        }
        Ok(())
    };
    body().map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|kind| Error::Format {
        path: path.to_path_buf(),
        kind,
    })
}

fn decode(bytes: &[u8]) -> Result<FeatureFile, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    r.version(FEATURE_VERSION)?;
    let count = r.u32("record count")? as usize;
    let embed_dim = r.u32("feature width")? as usize;
    let blocks = r.u32("block count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let sample_index = r.u32("sample index")?;
        let label = r.u32("label")?;
        let layer = r.u8("layer")?;
        if layer as usize > blocks {
            return Err(FormatError::Invalid(format!(
                "record {i} has layer {layer} but the file declares {blocks} blocks"
            )));
        }
        let values = r.f32s(embed_dim, "feature values")?;
        records.push(FeatureRecord {
            sample_index,
            label,
            layer,
            values,
        });
    }
    r.finish()?;
    Ok(FeatureFile {
        embed_dim,
        blocks,
        records,
    })
}
