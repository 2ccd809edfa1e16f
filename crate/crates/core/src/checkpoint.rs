//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `TSVM`, `u32` version, the twelve config
//! fields in declaration order (integers and flags as `u32`, dropout
//! probabilities as `f32`), the RNG algorithm name (`u8` length + bytes) and
//! seed (`u64`), then every learnable array in [`TsvitParams::tensors`] order
//! as raw `f32`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::config::TsvitConfig;
use crate::error::{Error, FormatError, Result};
use crate::io::{Reader, Writer};
use crate::model::{TsvitModel, TsvitParams};
use crate::rng::RNG_ALGORITHM;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TSVM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(model: &TsvitModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    encode(model, &mut bytes).map_err(|e| Error::io(path, e))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Serialized checkpoint image.
pub fn checkpoint_bytes<T: Scalar>(model: &TsvitModel<T>) -> Vec<u8> {
    let mut bytes = Vec::new();
    encode(model, &mut bytes).expect("writing to a Vec cannot fail");
    bytes
}

fn encode<T: Scalar>(model: &TsvitModel<T>, w: &mut impl Write) -> std::io::Result<()> {
    let c = model.config();
    let mut out = Writer::new(w);
    out.bytes(&CHECKPOINT_MAGIC)?;
    out.u32(CHECKPOINT_VERSION)?;
    for v in [
        c.signal_len,
        c.channels,
        c.patch_len,
        c.embed_dim,
        c.heads,
        c.blocks,
        c.mlp_dim,
        c.num_classes,
    ] {
        out.u32(v as u32)?;
    }
    out.f32(c.encoder_dropout as f32)?;
    out.f32(c.embed_dropout as f32)?;
    out.u32(c.use_position_embedding as u32)?;
    out.u32(c.use_post_embedding_dropout as u32)?;
    out.u8(RNG_ALGORITHM.len() as u8)?;
    out.bytes(RNG_ALGORITHM.as_bytes())?;
    out.u64(model.seed())?;
    for t in model.params().tensors() {
        let vals: Vec<f32> = t.data().iter().map(|v| v.as_f32()).collect();
        out.f32s(&vals)?;
    }
    Ok(())
}

/// Loads a checkpoint into a model of any precision.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<TsvitModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|kind| Error::Format {
        path: path.to_path_buf(),
        kind,
    })
}

/// Widens a stored `f32` probability to the shortest decimal that rounds to it.
fn widen(v: f32) -> f64 {
    format!("{v}").parse().unwrap_or(v as f64)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<TsvitModel<T>, FormatError> {
    decode(bytes)
}

fn decode<T: Scalar>(bytes: &[u8]) -> Result<TsvitModel<T>, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let mut ints = [0usize; 8];
    for v in &mut ints {
        *v = r.u32("config")? as usize;
    }
    let encoder_dropout = widen(r.f32("config")?);
    let embed_dropout = widen(r.f32("config")?);
    let flag = |v: u32| match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(FormatError::Invalid(format!("config flag must be 0 or 1, got {other}"))),
    };
    let use_position_embedding = flag(r.u32("config")?)?;
    let use_post_embedding_dropout = flag(r.u32("config")?)?;
    let config = TsvitConfig {
        signal_len: ints[0],
        channels: ints[1],
        patch_len: ints[2],
        embed_dim: ints[3],
        heads: ints[4],
        blocks: ints[5],
        mlp_dim: ints[6],
        num_classes: ints[7],
        encoder_dropout,
        embed_dropout,
        use_position_embedding,
        use_post_embedding_dropout,
    };
    config
        .validate()
        .map_err(|e| FormatError::Shape(e.to_string()))?;
    let name_len = r.u8("rng name")? as usize;
    let name = r.take(name_len, "rng name")?;
    if name != RNG_ALGORITHM.as_bytes() {
        return Err(FormatError::Invalid(format!(
            "checkpoint generator {:?} is not {RNG_ALGORITHM:?}",
            String::from_utf8_lossy(name)
        )));
    }
    let seed = r.u64("rng seed")?;
    let mut params = TsvitParams::<T>::zeros(&config).map_err(|e| FormatError::Shape(e.to_string()))?;
    for t in params.tensors_mut() {
        let vals = r.f32s(t.len(), "parameter arrays")?;
        for (d, v) in t.data_mut().iter_mut().zip(vals) {
            *d = T::of(v as f64);
        }
    }
    r.finish().map_err(|e| match e {
        FormatError::TrailingBytes(n) => {
            FormatError::Shape(format!("{n} bytes beyond the arrays the config implies"))
        }
        other => other,
    })?;
    TsvitModel::from_params(config, params, seed).map_err(|e| FormatError::Shape(e.to_string()))
}
