//! Closed-form parameter and FLOP accounting.
//!
//! FLOP convention: one multiply-add is 2 FLOPs; layer norm costs 5 ops per
//! element, GELU 1, softmax 5, and each bias addition 1. Every term is
//! reported separately so other conventions can be rebuilt from the parts.

use crate::config::TsvitConfig;

/// Learnable scalars of a network built from `config`.
pub fn count_params(config: &TsvitConfig) -> u64 {
    let c = dims(config);
    let patch = c.lp * c.ch * c.m + c.m;
    let class_token = c.m;
    let pos = c.s * c.m;
    let block = 4 * (c.m * c.m + c.m) + 4 * c.m + (c.m * c.d + c.d) + (c.d * c.m + c.m);
    let head = 2 * c.m + (c.m * c.nc + c.nc);
    patch + class_token + pos + c.b * block + head
}

/// Parameter subset that tracks the published hyperparameter sweep: the
/// block perceptrons, the patch convolution, the class token and the linear
/// classifier. Attention projections, layer norms and the position table
/// are left out.
pub fn count_params_paper_compatible(config: &TsvitConfig) -> u64 {
    let c = dims(config);
    let mlp = c.b * (c.m * c.d + c.d + c.d * c.m + c.m);
    let patch = c.lp * c.ch * c.m + c.m;
    mlp + patch + c.m + c.m * c.nc + c.nc
}

/// Per-sample forward FLOPs by sublayer, summed over all blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopBreakdown {
    pub patch_conv: u64,
    pub qkv: u64,
    pub scores: u64,
    pub attn_values: u64,
    pub out_proj: u64,
    pub mlp: u64,
    pub classifier: u64,
    pub layer_norm: u64,
    pub gelu: u64,
    pub softmax: u64,
    pub bias: u64,
}

impl FlopBreakdown {
    /// `(name, value)` for every term, in a fixed order.
    pub fn terms(&self) -> [(&'static str, u64); 11] {
        [
            ("patch_conv", self.patch_conv),
            ("qkv", self.qkv),
            ("scores", self.scores),
            ("attn_values", self.attn_values),
            ("out_proj", self.out_proj),
            ("mlp", self.mlp),
            ("classifier", self.classifier),
            ("layer_norm", self.layer_norm),
            ("gelu", self.gelu),
            ("softmax", self.softmax),
            ("bias", self.bias),
        ]
    }

    /// Matrix-product terms only.
    pub fn matmul_total(&self) -> u64 {
        self.patch_conv + self.qkv + self.scores + self.attn_values + self.out_proj + self.mlp + self.classifier
    }

    pub fn total(&self) -> u64 {
        self.terms().iter().map(|(_, v)| v).sum()
    }

    /// Convolution plus perceptron products, the subset that tracks the
    /// published FLOP column.
    pub fn paper_compatible(&self) -> u64 {
        self.patch_conv + self.mlp
    }
}

pub fn count_flops(config: &TsvitConfig) -> FlopBreakdown {
    let c = dims(config);
    let (s, m, d, b) = (c.s, c.m, c.d, c.b);
    FlopBreakdown {
        patch_conv: 2 * c.n * c.lp * c.ch * m,
        qkv: b * 3 * 2 * s * m * m,
        scores: b * 2 * s * s * m,
        attn_values: b * 2 * s * s * m,
        out_proj: b * 2 * s * m * m,
        mlp: b * 2 * 2 * s * m * d,
        classifier: 2 * m * c.nc,
        layer_norm: 5 * (b * 2 * s * m + m),
        gelu: b * s * d,
        softmax: 5 * b * c.h * s * s,
        bias: c.n * m + b * (4 * s * m + s * d + s * m) + c.nc,
    }
}

struct Dims {
    lp: u64,
    ch: u64,
    m: u64,
    h: u64,
    b: u64,
    d: u64,
    nc: u64,
    n: u64,
    s: u64,
}

fn dims(c: &TsvitConfig) -> Dims {
    let n = (c.signal_len / c.patch_len) as u64;
    Dims {
        lp: c.patch_len as u64,
        ch: c.channels as u64,
        m: c.embed_dim as u64,
        h: c.heads as u64,
        b: c.blocks as u64,
        d: c.mlp_dim as u64,
        nc: c.num_classes as u64,
        n,
        s: n + 1,
    }
}
