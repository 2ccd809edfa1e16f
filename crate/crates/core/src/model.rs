//! The network: patch embedding, class token and position table, a stack of
//! encoder blocks, and the classification head, each with a hand-written
//! reverse pass.
//!
//! Block layout (post-norm, layer norm applied before the attention residual):
//!
//! ```text
//! z_mlr = LN_attn(dropout(MSA(z_prev))) + z_prev
//! mlp   = dropout(dropout(GELU(z_mlr·W1 + b1))·W2 + b2)
//! z     = LN_out(mlp + z_mlr)
//! ```
//!
//! Batched tensors are `[batch, tokens, m]`; signals are `[batch, L, C]`.

use crate::attention::{msa_backward_into, msa_forward, MsaCache, MsaWeights};
use crate::config::TsvitConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{
    dropout, dropout_backward, gelu_backward_from_cdf, gelu_with_cdf, layer_norm, layer_norm_backward, linear,
    linear_backward, softmax_rows, DropoutMask, LayerNormCache, Tensor, LN_EPS,
};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedWeights<T> {
    /// `(L_p·C) × m`; row `i·C + j` holds tap `i` of channel `j`.
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    fn identity(m: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[m]),
            beta: Tensor::zeros(&[m]),
        }
    }

    fn zeros(m: usize) -> Self {
        Self {
            gamma: Tensor::zeros(&[m]),
            beta: Tensor::zeros(&[m]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub msa: MsaWeights<T>,
    pub ln_attn: LayerNormParams<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
    pub ln_out: LayerNormParams<T>,
}

impl<T: Scalar> BlockWeights<T> {
    pub fn zeros(config: &TsvitConfig) -> Result<Self> {
        let (m, d) = (config.embed_dim, config.mlp_dim);
        Ok(Self {
            msa: MsaWeights::zeros(m, config.heads)?,
            ln_attn: LayerNormParams::zeros(m),
            mlp_w1: Tensor::zeros(&[m, d]),
            mlp_b1: Tensor::zeros(&[d]),
            mlp_w2: Tensor::zeros(&[d, m]),
            mlp_b2: Tensor::zeros(&[m]),
            ln_out: LayerNormParams::zeros(m),
        })
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.msa.tensors().to_vec();
        v.extend([
            &self.ln_attn.gamma,
            &self.ln_attn.beta,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
            &self.ln_out.gamma,
            &self.ln_out.beta,
        ]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self.msa.tensors_mut().into_iter().collect();
        v.extend([
            &mut self.ln_attn.gamma,
            &mut self.ln_attn.beta,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
            &mut self.ln_out.gamma,
            &mut self.ln_out.beta,
        ]);
        v
    }
}

/// Every learnable array of the network. Also used, zero-filled, as the
/// gradient buffer and as optimizer moment storage.
#[derive(Debug, Clone, PartialEq)]
pub struct TsvitParams<T> {
    pub patch: PatchEmbedWeights<T>,
    pub class_token: Tensor<T>,
    pub pos: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub ln_cls: LayerNormParams<T>,
    pub w_class: Tensor<T>,
    pub b_class: Tensor<T>,
}

impl<T: Scalar> TsvitParams<T> {
    pub fn zeros(config: &TsvitConfig) -> Result<Self> {
        config.validate()?;
        let m = config.embed_dim;
        Ok(Self {
            patch: PatchEmbedWeights {
                kernel: Tensor::zeros(&[config.patch_len * config.channels, m]),
                bias: Tensor::zeros(&[m]),
            },
            class_token: Tensor::zeros(&[1, m]),
            pos: Tensor::zeros(&[config.seq_len(), m]),
            blocks: (0..config.blocks)
                .map(|_| BlockWeights::zeros(config))
                .collect::<Result<_>>()?,
            ln_cls: LayerNormParams::zeros(m),
            w_class: Tensor::zeros(&[m, config.num_classes]),
            b_class: Tensor::zeros(&[config.num_classes]),
        })
    }

    /// All arrays in declaration order (the checkpoint order).
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.patch.kernel, &self.patch.bias, &self.class_token, &self.pos];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend([&self.ln_cls.gamma, &self.ln_cls.beta, &self.w_class, &self.b_class]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![
            &mut self.patch.kernel,
            &mut self.patch.bias,
            &mut self.class_token,
            &mut self.pos,
        ];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend([
            &mut self.ln_cls.gamma,
            &mut self.ln_cls.beta,
            &mut self.w_class,
            &mut self.b_class,
        ]);
        v
    }

    pub fn element_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn fill(&mut self, value: T) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn cast<U: Scalar>(&self) -> TsvitParams<U> {
        let cv = |t: &Tensor<T>| t.cast::<U>();
        TsvitParams {
            patch: PatchEmbedWeights {
                kernel: cv(&self.patch.kernel),
                bias: cv(&self.patch.bias),
            },
            class_token: cv(&self.class_token),
            pos: cv(&self.pos),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    msa: MsaWeights {
                        wq: cv(&b.msa.wq),
                        wk: cv(&b.msa.wk),
                        wv: cv(&b.msa.wv),
                        bq: cv(&b.msa.bq),
                        bk: cv(&b.msa.bk),
                        bv: cv(&b.msa.bv),
                        wo: cv(&b.msa.wo),
                        bo: cv(&b.msa.bo),
                        heads: b.msa.heads,
                    },
                    ln_attn: LayerNormParams {
                        gamma: cv(&b.ln_attn.gamma),
                        beta: cv(&b.ln_attn.beta),
                    },
                    mlp_w1: cv(&b.mlp_w1),
                    mlp_b1: cv(&b.mlp_b1),
                    mlp_w2: cv(&b.mlp_w2),
                    mlp_b2: cv(&b.mlp_b2),
                    ln_out: LayerNormParams {
                        gamma: cv(&b.ln_out.gamma),
                        beta: cv(&b.ln_out.beta),
                    },
                })
                .collect(),
            ln_cls: LayerNormParams {
                gamma: cv(&self.ln_cls.gamma),
                beta: cv(&self.ln_cls.beta),
            },
            w_class: cv(&self.w_class),
            b_class: cv(&self.b_class),
        }
    }
}

/// A configured network with its paired gradient buffer.
///
/// Parameter access goes through [`TsvitModel::params_mut`], which bumps a
/// generation counter so a forward cache cannot be replayed against weights
/// that changed after it was recorded.
#[derive(Debug, Clone)]
pub struct TsvitModel<T> {
    config: TsvitConfig,
    params: TsvitParams<T>,
    grads: TsvitParams<T>,
    seed: u64,
    generation: u64,
}

impl<T: Scalar> TsvitModel<T> {
    pub fn from_params(config: TsvitConfig, params: TsvitParams<T>, seed: u64) -> Result<Self> {
        let grads = TsvitParams::zeros(&config)?;
        let expected = grads.tensors();
        let got = params.tensors();
        if expected.len() != got.len() {
            return Err(Error::Config(format!(
                "parameter set has {} arrays, config implies {}",
                got.len(),
                expected.len()
            )));
        }
        for (e, g) in expected.iter().zip(&got) {
            if e.shape() != g.shape() {
                return Err(Error::dim("model parameters", g.shape(), e.shape()));
            }
        }
        if params.blocks.iter().any(|b| b.msa.heads != config.heads) {
            return Err(Error::Config("attention head count disagrees with config".into()));
        }
        Ok(Self {
            config,
            params,
            grads,
            seed,
            generation: 0,
        })
    }

    pub fn config(&self) -> &TsvitConfig {
        &self.config
    }

    pub fn params(&self) -> &TsvitParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut TsvitParams<T> {
        self.generation += 1;
        &mut self.params
    }

    pub fn grads(&self) -> &TsvitParams<T> {
        &self.grads
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(T::zero());
    }

    /// Mutable parameters alongside read-only gradients, for optimizer steps.
    pub fn params_and_grads_mut(&mut self) -> (&mut TsvitParams<T>, &TsvitParams<T>) {
        self.generation += 1;
        (&mut self.params, &self.grads)
    }

    /// Seed of the generator that initialized the weights.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    /// Same weights in another precision, with fresh gradients.
    pub fn cast<U: Scalar>(&self) -> TsvitModel<U> {
        TsvitModel::from_params(self.config.clone(), self.params.cast(), self.seed)
            .expect("cast preserves shapes")
    }
}

fn trunc_normal<T: Scalar>(t: &mut Tensor<T>, rng: &mut Rng) {
    for v in t.data_mut() {
        *v = T::of(rng.truncated_normal(INIT_STD));
    }
}

/// Truncated-normal weights and position table, zero biases and class
/// token, unit layer-norm gains.
pub fn init_model<T: Scalar>(config: &TsvitConfig, rng: &mut Rng) -> Result<TsvitModel<T>> {
    config.validate()?;
    let m = config.embed_dim;
    let mut p = TsvitParams::<T>::zeros(config)?;
    trunc_normal(&mut p.patch.kernel, rng);
    trunc_normal(&mut p.pos, rng);
    for b in &mut p.blocks {
        for w in [&mut b.msa.wq, &mut b.msa.wk, &mut b.msa.wv, &mut b.msa.wo] {
            trunc_normal(w, rng);
        }
        b.ln_attn = LayerNormParams::identity(m);
        trunc_normal(&mut b.mlp_w1, rng);
        trunc_normal(&mut b.mlp_w2, rng);
        b.ln_out = LayerNormParams::identity(m);
    }
    p.ln_cls = LayerNormParams::identity(m);
    trunc_normal(&mut p.w_class, rng);
    TsvitModel::from_params(config.clone(), p, rng.seed())
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

fn signal_batch(x: &Tensor<impl Scalar>, config: &TsvitConfig) -> Result<usize> {
    let (l, c) = (config.signal_len, config.channels);
    let batch = match *x.shape() {
        [xl, xc] if xl == l && xc == c => 1,
        [b, xl, xc] if xl == l && xc == c => b,
        _ => return Err(Error::dim("signal", x.shape(), &[l, c])),
    };
    Ok(batch)
}

/// Non-overlapping patch convolution, stride `L_p`: row `p` is
/// `flatten(x[p·L_p .. (p+1)·L_p, :])·kernel + bias`.
///
/// Returns `[n, m]` for a single `[L, C]` signal, `[batch, n, m]` otherwise.
pub fn patch_embed<T: Scalar>(x: &Tensor<T>, w: &PatchEmbedWeights<T>, config: &TsvitConfig) -> Result<Tensor<T>> {
    if x.shape().len() >= 2 && !x.shape()[x.shape().len() - 2].is_multiple_of(config.patch_len) {
        return Err(Error::dim("patch_embed", x.shape(), &[config.patch_len]));
    }
    let batch = signal_batch(x, config)?;
    let n = config.num_patches();
    let patches = x.clone().reshape(&[batch * n, config.patch_len * config.channels])?;
    let out = linear(&patches, &w.kernel, &w.bias)?;
    let shape = if x.shape().len() == 2 {
        vec![n, config.embed_dim]
    } else {
        vec![batch, n, config.embed_dim]
    };
    out.reshape(&shape)
}

#[derive(Debug, Clone)]
pub struct EmbedCache<T> {
    patches: Tensor<T>,
    mask: DropoutMask<T>,
}

/// Class token prepended to the patch embeddings, plus the position table,
/// then dropout; returns `[batch, n+1, m]`.
pub fn embed<T: Scalar>(
    x: &Tensor<T>,
    params: &TsvitParams<T>,
    config: &TsvitConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor<T>, EmbedCache<T>)> {
    let batch = signal_batch(x, config)?;
    let (n, m, s) = (config.num_patches(), config.embed_dim, config.seq_len());
    let pe = patch_embed(x, &params.patch, config)?;
    let mut tokens = Tensor::zeros(&[batch, s, m]);
    {
        let out = tokens.data_mut();
        for b in 0..batch {
            let seq = &mut out[b * s * m..(b + 1) * s * m];
            seq[..m].copy_from_slice(params.class_token.data());
            seq[m..].copy_from_slice(&pe.data()[b * n * m..(b + 1) * n * m]);
            if config.use_position_embedding {
                for (v, &p) in seq.iter_mut().zip(params.pos.data()) {
                    *v += p;
                }
            }
        }
    }
    let (tokens, mask) = if config.use_post_embedding_dropout {
        dropout(&tokens, config.embed_dropout, rng, training)?
    } else {
        (tokens, DropoutMask::Identity)
    };
    let patches = x.clone().reshape(&[batch * n, config.patch_len * config.channels])?;
    Ok((tokens, EmbedCache { patches, mask }))
}

fn embed_backward<T: Scalar>(
    params: &TsvitParams<T>,
    config: &TsvitConfig,
    cache: &EmbedCache<T>,
    d_tokens: &Tensor<T>,
    grads: &mut TsvitParams<T>,
) -> Result<()> {
    let d = dropout_backward(&cache.mask, d_tokens)?;
    let (n, m, s) = (config.num_patches(), config.embed_dim, config.seq_len());
    let batch = d.len() / (s * m);
    let mut d_patch = Tensor::zeros(&[batch * n, m]);
    for b in 0..batch {
        let seq = &d.data()[b * s * m..(b + 1) * s * m];
        for (g, &v) in grads.class_token.data_mut().iter_mut().zip(&seq[..m]) {
            *g += v;
        }
        if config.use_position_embedding {
            for (g, &v) in grads.pos.data_mut().iter_mut().zip(seq) {
                *g += v;
            }
        }
        d_patch.data_mut()[b * n * m..(b + 1) * n * m].copy_from_slice(&seq[m..]);
    }
    linear_backward(
        &cache.patches,
        &params.patch.kernel,
        &d_patch,
        &mut grads.patch.kernel,
        &mut grads.patch.bias,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    msa: MsaCache<T>,
    attn_mask: DropoutMask<T>,
    ln_attn: LayerNormCache<T>,
    z_mlr: Tensor<T>,
    hidden: Tensor<T>,
    hidden_cdf: Tensor<T>,
    hidden_mask: DropoutMask<T>,
    activated: Tensor<T>,
    out_mask: DropoutMask<T>,
    ln_out: LayerNormCache<T>,
}

pub fn block_forward<T: Scalar>(
    z_prev: &Tensor<T>,
    w: &BlockWeights<T>,
    rng: &mut Rng,
    p_drop: f64,
    training: bool,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    let (attn, msa) = msa_forward(z_prev, &w.msa)?;
    let (attn, attn_mask) = dropout(&attn, p_drop, rng, training)?;
    let (normed, ln_attn) = layer_norm(&attn, &w.ln_attn.gamma, &w.ln_attn.beta, LN_EPS)?;
    let z_mlr = normed.add(z_prev)?;

    let hidden = linear(&z_mlr, &w.mlp_w1, &w.mlp_b1)?;
    let (activated, hidden_cdf) = gelu_with_cdf(&hidden);
    let (activated, hidden_mask) = dropout(&activated, p_drop, rng, training)?;
    let projected = linear(&activated, &w.mlp_w2, &w.mlp_b2)?;
    let (mlp, out_mask) = dropout(&projected, p_drop, rng, training)?;
    let (z, ln_out) = layer_norm(&mlp.add(&z_mlr)?, &w.ln_out.gamma, &w.ln_out.beta, LN_EPS)?;

    let cache = BlockCache {
        msa,
        attn_mask,
        ln_attn,
        z_mlr,
        hidden,
        hidden_cdf,
        hidden_mask,
        activated,
        out_mask,
        ln_out,
    };
    Ok((z, cache))
}

/// Accumulates into `grads`; returns the gradient w.r.t. the block input.
pub fn block_backward<T: Scalar>(
    w: &BlockWeights<T>,
    cache: &BlockCache<T>,
    d_out: &Tensor<T>,
    grads: &mut BlockWeights<T>,
) -> Result<Tensor<T>> {
    let (d_sum, dg, db) = layer_norm_backward(&cache.ln_out, &w.ln_out.gamma, d_out)?;
    grads.ln_out.gamma.add_assign(&dg)?;
    grads.ln_out.beta.add_assign(&db)?;

    let d_projected = dropout_backward(&cache.out_mask, &d_sum)?;
    let d_activated = linear_backward(
        &cache.activated,
        &w.mlp_w2,
        &d_projected,
        &mut grads.mlp_w2,
        &mut grads.mlp_b2,
    )?;
    let d_gelu = dropout_backward(&cache.hidden_mask, &d_activated)?;
    let d_hidden = gelu_backward_from_cdf(&cache.hidden, &cache.hidden_cdf, &d_gelu)?;
    let mut d_mlr = linear_backward(&cache.z_mlr, &w.mlp_w1, &d_hidden, &mut grads.mlp_w1, &mut grads.mlp_b1)?;
    d_mlr.add_assign(&d_sum)?;

    let (d_attn, dg, db) = layer_norm_backward(&cache.ln_attn, &w.ln_attn.gamma, &d_mlr)?;
    grads.ln_attn.gamma.add_assign(&dg)?;
    grads.ln_attn.beta.add_assign(&db)?;
    let d_attn = dropout_backward(&cache.attn_mask, &d_attn)?;
    let mut d_prev = msa_backward_into(&w.msa, &cache.msa, &d_attn, &mut grads.msa)?;
    d_prev.add_assign(&d_mlr)?;
    Ok(d_prev)
}

/// Runs every block in order. Returns the final state, each block's output,
/// and the caches for the reverse pass.
#[allow(clippy::type_complexity)]
pub fn encoder_forward<T: Scalar>(
    z0: &Tensor<T>,
    params: &TsvitParams<T>,
    config: &TsvitConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor<T>, Vec<Tensor<T>>, Vec<BlockCache<T>>)> {
    let mut outputs = Vec::with_capacity(params.blocks.len());
    let mut caches = Vec::with_capacity(params.blocks.len());
    let mut z = z0.clone();
    for w in &params.blocks {
        let (next, cache) = block_forward(&z, w, rng, config.encoder_dropout, training)?;
        outputs.push(next.clone());
        caches.push(cache);
        z = next;
    }
    Ok((z, outputs, caches))
}

// ---------------------------------------------------------------------------
// Classification head and loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClassifyCache<T> {
    ln: LayerNormCache<T>,
    mask: DropoutMask<T>,
    dropped: Tensor<T>,
}

/// `dropout(LN(z))·W_class + b_class` on the class-token rows `[batch, m]`.
/// Head dropout uses the encoder probability.
pub fn classify_forward<T: Scalar>(
    class_rows: &Tensor<T>,
    params: &TsvitParams<T>,
    config: &TsvitConfig,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor<T>, ClassifyCache<T>)> {
    let (normed, ln) = layer_norm(class_rows, &params.ln_cls.gamma, &params.ln_cls.beta, LN_EPS)?;
    let (dropped, mask) = dropout(&normed, config.encoder_dropout, rng, training)?;
    let logits = linear(&dropped, &params.w_class, &params.b_class)?;
    Ok((logits, ClassifyCache { ln, mask, dropped }))
}

/// Class probabilities from logits.
pub fn probabilities<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    softmax_rows(logits)
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let classes = logits.cols();
    let batch = logits.rows();
    if labels.len() != batch {
        return Err(Error::Data(format!("{} labels for {batch} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let inv_batch = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (r, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += max + z.ln() - row[y];
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = (row[c] - max).exp() / z;
            let onehot = if c == y { 1.0 } else { 0.0 };
            *g = T::of((p - onehot) * inv_batch);
        }
    }
    Ok((loss * inv_batch, grad))
}

// ---------------------------------------------------------------------------
// Whole network
// ---------------------------------------------------------------------------

/// Everything [`model_backward`] needs, tagged with the parameter
/// generation it was computed against.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    generation: u64,
    batch: usize,
    embed: EmbedCache<T>,
    blocks: Vec<BlockCache<T>>,
    block_outputs: Vec<Tensor<T>>,
    classify: ClassifyCache<T>,
}

impl<T> ForwardCache<T> {
    /// Output of each encoder block, `[batch, n+1, m]`.
    pub fn block_outputs(&self) -> &[Tensor<T>] {
        &self.block_outputs
    }
}

/// Gathers row 0 of every sequence: `[batch, s, m]` → `[batch, m]`.
pub fn class_token_rows<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, s, m) = match *z.shape() {
        [b, s, m] => (b, s, m),
        _ => return Err(Error::dim("class_token_rows", z.shape(), &[0, 0, 0])),
    };
    let mut out = Tensor::zeros(&[batch, m]);
    for b in 0..batch {
        out.row_mut(b).copy_from_slice(&z.data()[b * s * m..b * s * m + m]);
    }
    Ok(out)
}

/// Logits `[batch, N_c]` for signals `[batch, L, C]` (or one `[L, C]`).
pub fn model_forward<T: Scalar>(
    model: &TsvitModel<T>,
    x: &Tensor<T>,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let config = model.config();
    let params = model.params();
    let batch = signal_batch(x, config)?;
    let (z0, embed_cache) = embed(x, params, config, rng, training)?;
    let (z, block_outputs, blocks) = encoder_forward(&z0, params, config, rng, training)?;
    let (logits, classify) = classify_forward(&class_token_rows(&z)?, params, config, rng, training)?;
    let cache = ForwardCache {
        generation: model.generation(),
        batch,
        embed: embed_cache,
        blocks,
        block_outputs,
        classify,
    };
    Ok((logits, cache))
}

/// Accumulates exact parameter gradients into the model's gradient buffer.
pub fn model_backward<T: Scalar>(model: &mut TsvitModel<T>, cache: &ForwardCache<T>, d_logits: &Tensor<T>) -> Result<()> {
    if cache.generation != model.generation {
        return Err(Error::Contract(format!(
            "forward cache from parameter generation {} used at generation {}",
            cache.generation, model.generation
        )));
    }
    let config = &model.config;
    let params = &model.params;
    let grads = &mut model.grads;
    let (m, s) = (config.embed_dim, config.seq_len());
    if d_logits.shape() != [cache.batch, config.num_classes] {
        return Err(Error::dim("model_backward", d_logits.shape(), &[cache.batch, config.num_classes]));
    }

    let d_dropped = linear_backward(
        &cache.classify.dropped,
        &params.w_class,
        d_logits,
        &mut grads.w_class,
        &mut grads.b_class,
    )?;
    let d_normed = dropout_backward(&cache.classify.mask, &d_dropped)?;
    let (d_rows, dg, db) = layer_norm_backward(&cache.classify.ln, &params.ln_cls.gamma, &d_normed)?;
    grads.ln_cls.gamma.add_assign(&dg)?;
    grads.ln_cls.beta.add_assign(&db)?;

    let mut d_z = Tensor::zeros(&[cache.batch, s, m]);
    for b in 0..cache.batch {
        d_z.data_mut()[b * s * m..b * s * m + m].copy_from_slice(d_rows.row(b));
    }
    for ((w, c), g) in params
        .blocks
        .iter()
        .zip(&cache.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        d_z = block_backward(w, c, &d_z, g)?;
    }
    embed_backward(params, config, &cache.embed, &d_z, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TsvitConfig {
        TsvitConfig {
            signal_len: 8,
            channels: 1,
            patch_len: 4,
            embed_dim: 4,
            heads: 2,
            blocks: 2,
            mlp_dim: 8,
            num_classes: 3,
            encoder_dropout: 0.0,
            embed_dropout: 0.0,
            use_position_embedding: true,
            use_post_embedding_dropout: true,
        }
    }

    #[test]
    fn patch_embed_hand_example() {
        let cfg = TsvitConfig {
            signal_len: 4,
            patch_len: 2,
            embed_dim: 1,
            heads: 1,
            ..tiny()
        };
        let w = PatchEmbedWeights {
            kernel: Tensor::<f64>::ones(&[2, 1]),
            bias: Tensor::zeros(&[1]),
        };
        let x = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pe = patch_embed(&x, &w, &cfg).unwrap();
        assert_eq!(pe, Tensor::from_rows(&[&[3.0], &[7.0]]));
        assert_eq!(patch_embed(&Tensor::zeros(&[4, 1]), &w, &cfg).unwrap().max_abs(), 0.0);
        assert!(matches!(
            patch_embed(&Tensor::zeros(&[5, 1]), &w, &cfg),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn table3_embedding_shapes() {
        let cfg = TsvitConfig::table3();
        let model = init_model::<f32>(&cfg, &mut Rng::new(0)).unwrap();
        let x = Tensor::zeros(&[2048, 1]);
        assert_eq!(patch_embed(&x, &model.params().patch, &cfg).unwrap().shape(), &[64, 192]);
        let (tokens, _) = embed(&x, model.params(), &cfg, &mut Rng::new(1), false).unwrap();
        assert_eq!(tokens.shape(), &[1, 65, 192]);
    }

    #[test]
    fn embed_places_class_token_first() {
        let cfg = tiny();
        let mut model = init_model::<f64>(&cfg, &mut Rng::new(3)).unwrap();
        model.params_mut().class_token = Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0]]);
        model.params_mut().pos.fill(0.0);
        let x = Tensor::from_fn(&[8, 1], |i| i as f64);
        let (tokens, _) = embed(&x, model.params(), &cfg, &mut Rng::new(0), false).unwrap();
        assert_eq!(&tokens.data()[..4], &[1.0, 2.0, 3.0, 4.0]);
        let pe = patch_embed(&x, &model.params().patch, &cfg).unwrap();
        assert_eq!(&tokens.data()[4..], pe.data());
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = TsvitConfig::table3();
        let a = init_model::<f32>(&cfg, &mut Rng::new(42)).unwrap();
        let b = init_model::<f32>(&cfg, &mut Rng::new(42)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.param_count(), 3_580_234);
        let p = a.params();
        assert!(p.patch.kernel.max_abs() <= 0.04 && p.patch.kernel.max_abs() > 0.0);
        assert_eq!(p.class_token.max_abs(), 0.0);
        assert_eq!(p.blocks[0].ln_attn.gamma, Tensor::ones(&[192]));
        assert_eq!(p.blocks[0].msa.bq.max_abs(), 0.0);
        assert!(init_model::<f32>(&TsvitConfig { blocks: 0, ..cfg }, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn zeroed_block_matches_hand_evaluation() {
        // All weights zero, LN gains one: MSA is 0, so LN_attn(0) = beta_attn
        // and z_mlr = beta_attn + z_prev. The MLP then outputs b2, and the
        // block returns LN_out(b2 + z_mlr).
        let cfg = tiny();
        let mut w = BlockWeights::<f64>::zeros(&cfg).unwrap();
        w.ln_attn.gamma.fill(1.0);
        w.ln_out.gamma.fill(1.0);
        w.ln_attn.beta = Tensor::from_fn(&[4], |i| 0.1 * i as f64);
        w.mlp_b2 = Tensor::from_fn(&[4], |i| -0.3 + 0.2 * i as f64);
        let z = Tensor::from_fn(&[1, 5, 4], |i| ((i * 7) % 11) as f64 - 5.0);
        let (out, _) = block_forward(&z, &w, &mut Rng::new(0), 0.0, false).unwrap();
        for r in 0..5 {
            let pre: Vec<f64> = (0..4)
                .map(|c| z.data()[r * 4 + c] + 0.1 * c as f64 + (-0.3 + 0.2 * c as f64))
                .collect();
            let mean = pre.iter().sum::<f64>() / 4.0;
            let var = pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for c in 0..4 {
                let want = (pre[c] - mean) / (var + LN_EPS).sqrt();
                assert!((out.data()[r * 4 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_is_pure_without_dropout() {
        let cfg = tiny();
        let model = init_model::<f64>(&cfg, &mut Rng::new(8)).unwrap();
        let z = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin());
        let w = &model.params().blocks[0];
        let (a, _) = block_forward(&z, w, &mut Rng::new(1), 0.0, true).unwrap();
        let (b, _) = block_forward(&z, w, &mut Rng::new(2), 0.0, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_retains_every_block_output() {
        let cfg = TsvitConfig { blocks: 1, ..tiny() };
        let model = init_model::<f64>(&cfg, &mut Rng::new(8)).unwrap();
        let z = Tensor::from_fn(&[1, 3, 4], |i| i as f64);
        let (zb, outs, _) = encoder_forward(&z, model.params(), &cfg, &mut Rng::new(0), false).unwrap();
        let (single, _) = block_forward(&z, &model.params().blocks[0], &mut Rng::new(0), 0.0, false).unwrap();
        assert_eq!(zb, single);
        assert_eq!(outs.len(), 1);
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, _) = cross_entropy_loss(&Tensor::<f64>::from_rows(&[&[30.0, 0.0, 0.0]]), &[0]).unwrap();
        assert!(loss < 1e-9);
        let (loss, grad) = cross_entropy_loss(&Tensor::<f64>::zeros(&[2, 4]), &[1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.38629).abs() < 1e-5);
        for r in 0..2 {
            assert!(grad.row(r).iter().sum::<f64>().abs() < 1e-15);
        }
        assert!(matches!(
            cross_entropy_loss(&Tensor::<f64>::zeros(&[1, 3]), &[3]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn zero_classifier_gives_uniform_probabilities() {
        let cfg = tiny();
        let mut model = init_model::<f64>(&cfg, &mut Rng::new(1)).unwrap();
        model.params_mut().w_class.fill(0.0);
        let x = Tensor::from_fn(&[8, 1], |i| i as f64);
        let (logits, _) = model_forward(&model, &x, &mut Rng::new(0), false).unwrap();
        assert_eq!(logits.max_abs(), 0.0);
        let p = probabilities(&logits);
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn batch_matches_per_sample_pipeline() {
        let cfg = tiny();
        let model = init_model::<f64>(&cfg, &mut Rng::new(4)).unwrap();
        let x = Tensor::from_fn(&[3, 8, 1], |i| (i as f64 * 0.3).cos());
        let (batched, _) = model_forward(&model, &x, &mut Rng::new(0), false).unwrap();
        assert_eq!(batched.shape(), &[3, 3]);
        for b in 0..3 {
            let xi = Tensor::new(&[8, 1], x.data()[b * 8..(b + 1) * 8].to_vec()).unwrap();
            let (single, _) = model_forward(&model, &xi, &mut Rng::new(0), false).unwrap();
            for c in 0..3 {
                assert!((single.at(0, c) - batched.at(b, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_logit_gradient_gives_zero_gradients() {
        let cfg = tiny();
        let mut model = init_model::<f64>(&cfg, &mut Rng::new(4)).unwrap();
        let x = Tensor::from_fn(&[2, 8, 1], |i| i as f64);
        let (_, cache) = model_forward(&model, &x, &mut Rng::new(0), true).unwrap();
        model_backward(&mut model, &cache, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(model.grads().tensors().iter().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn stale_forward_cache_is_rejected() {
        let cfg = tiny();
        let mut model = init_model::<f64>(&cfg, &mut Rng::new(4)).unwrap();
        let x = Tensor::from_fn(&[8, 1], |i| i as f64);
        let (_, cache) = model_forward(&model, &x, &mut Rng::new(0), false).unwrap();
        model.params_mut().b_class.fill(1.0);
        let err = model_backward(&mut model, &cache, &Tensor::ones(&[1, 3])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
