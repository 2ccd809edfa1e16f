//! Multi-head scaled dot-product self-attention and its reverse pass.
//!
//! Inputs are `[s, m]` or `[batch, s, m]`; every sequence in a batch is
//! attended independently. The `h` per-head projections live side by side in
//! the columns of one `m×m` matrix, so head `i` reads columns
//! `i·d_k .. (i+1)·d_k` of Q, K and V.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{flop_counter, linear, linear_backward, softmax_backward_row, softmax_in_place, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct MsaWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bq: Tensor<T>,
    pub bk: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> MsaWeights<T> {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        let mat = || Tensor::zeros(&[dim, dim]);
        let vec = || Tensor::zeros(&[dim]);
        Ok(Self {
            wq: mat(),
            wk: mat(),
            wv: mat(),
            bq: vec(),
            bk: vec(),
            bv: vec(),
            wo: mat(),
            bo: vec(),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn tensors(&self) -> [&Tensor<T>; 8] {
        [&self.wq, &self.wk, &self.wv, &self.bq, &self.bk, &self.bv, &self.wo, &self.bo]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bq,
            &mut self.bk,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]
    }

    fn validate(&self) -> Result<()> {
        let m = self.dim();
        if self.heads == 0 || !m.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("embedding dim {m} is not divisible by {} heads", self.heads)));
        }
        for t in self.tensors() {
            let ok = match t.shape() {
                [r, c] => *r == m && *c == m,
                [n] => *n == m,
                _ => false,
            };
            if !ok {
                return Err(Error::dim("msa weights", t.shape(), &[m, m]));
            }
        }
        Ok(())
    }

    /// Order-sensitive digest of every weight bit, used to detect a cache
    /// outliving the weights it was computed with.
    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data() {
                h ^= v.as_f64().to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Activations saved by [`msa_forward`].
#[derive(Debug, Clone)]
pub struct MsaCache<T> {
    input: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Row-stochastic attention matrices, `[batch][head]` each `s×s`.
    probs: Vec<T>,
    concat: Tensor<T>,
    seq_len: usize,
    fingerprint: u64,
}

impl<T: Scalar> MsaCache<T> {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Attention matrix of one head of one sequence, row-major `s×s`.
    pub fn attention(&self, batch: usize, head: usize, heads: usize) -> &[T] {
        let ss = self.seq_len * self.seq_len;
        let off = (batch * heads + head) * ss;
        &self.probs[off..off + ss]
    }
}

fn split_seq(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [s, _] => Ok((1, s)),
        [b, s, _] => Ok((b, s)),
        _ => Err(Error::dim("msa input", shape, &[0, 0, 0])),
    }
}

/// One strided product `C = alpha·A·B (+ C)`; offsets index into each slice.
#[allow(clippy::too_many_arguments)]
fn gemm_view<T: Scalar>(
    (m, k, n): (usize, usize, usize),
    alpha: T,
    a: &[T],
    a_off: usize,
    a_strides: (isize, isize),
    b: &[T],
    b_off: usize,
    b_strides: (isize, isize),
    accumulate: bool,
    c: &mut [T],
    c_off: usize,
    c_strides: (isize, isize),
) {
    flop_counter::add(m, k, n);
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        alpha,
        &a[a_off..],
        a_strides,
        &b[b_off..],
        b_strides,
        beta,
        &mut c[c_off..],
        c_strides,
    );
}

/// `Concat(head_1..head_h)·W^O + b_o` with
/// `head_i = softmax(Q_i K_iᵀ / √d_k) V_i`.
pub fn msa_forward<T: Scalar>(y: &Tensor<T>, w: &MsaWeights<T>) -> Result<(Tensor<T>, MsaCache<T>)> {
    w.validate()?;
    let (batch, s) = split_seq(y.shape())?;
    let m = w.dim();
    if y.cols() != m {
        return Err(Error::dim("msa_forward", y.shape(), w.wq.shape()));
    }
    let (h, dk) = (w.heads, w.head_dim());
    let scale = T::one() / T::of_usize(dk).sqrt();
    let mi = m as isize;
    let si = s as isize;

    let q = linear(y, &w.wq, &w.bq)?;
    let k = linear(y, &w.wk, &w.bk)?;
    let v = linear(y, &w.wv, &w.bv)?;
    let mut probs = vec![T::zero(); batch * h * s * s];
    let mut concat = Tensor::zeros(y.shape());

    for b in 0..batch {
        for head in 0..h {
            let base = b * s * m + head * dk;
            let p_off = (b * h + head) * s * s;
            let p = &mut probs[p_off..p_off + s * s];
            // scores = Q_i · K_iᵀ / √d_k
            gemm_view(
                (s, dk, s),
                scale,
                q.data(),
                base,
                (mi, 1),
                k.data(),
                base,
                (1, mi),
                false,
                p,
                0,
                (si, 1),
            );
            for row in p.chunks_exact_mut(s) {
                softmax_in_place(row);
            }
            gemm_view(
                (s, s, dk),
                T::one(),
                p,
                0,
                (si, 1),
                v.data(),
                base,
                (mi, 1),
                false,
                concat.data_mut(),
                base,
                (mi, 1),
            );
        }
    }
    let out = linear(&concat, &w.wo, &w.bo)?;
    let cache = MsaCache {
        input: y.clone(),
        q,
        k,
        v,
        probs,
        concat,
        seq_len: s,
        fingerprint: w.fingerprint(),
    };
    Ok((out, cache))
}

/// Accumulates parameter gradients into `grads` and returns `dY`.
pub fn msa_backward_into<T: Scalar>(
    w: &MsaWeights<T>,
    cache: &MsaCache<T>,
    d_out: &Tensor<T>,
    grads: &mut MsaWeights<T>,
) -> Result<Tensor<T>> {
    if cache.fingerprint != w.fingerprint() {
        return Err(Error::Contract(
            "attention cache was recorded with different weights".into(),
        ));
    }
    if d_out.shape() != cache.input.shape() {
        return Err(Error::dim("msa_backward", d_out.shape(), cache.input.shape()));
    }
    let (batch, s) = split_seq(d_out.shape())?;
    let m = w.dim();
    let (h, dk) = (w.heads, w.head_dim());
    let scale = T::one() / T::of_usize(dk).sqrt();
    let mi = m as isize;
    let si = s as isize;

    let d_concat = linear_backward(&cache.concat, &w.wo, d_out, &mut grads.wo, &mut grads.bo)?;
    let mut dq = Tensor::zeros(d_out.shape());
    let mut dk_t = Tensor::zeros(d_out.shape());
    let mut dv = Tensor::zeros(d_out.shape());
    let mut dp = vec![T::zero(); s * s];

    for b in 0..batch {
        for head in 0..h {
            let base = b * s * m + head * dk;
            let p = cache.attention(b, head, h);
            // dP = dHead · V_iᵀ
            gemm_view(
                (s, dk, s),
                T::one(),
                d_concat.data(),
                base,
                (mi, 1),
                cache.v.data(),
                base,
                (1, mi),
                false,
                &mut dp,
                0,
                (si, 1),
            );
            // dV_i = Pᵀ · dHead
            gemm_view(
                (s, s, dk),
                T::one(),
                p,
                0,
                (1, si),
                d_concat.data(),
                base,
                (mi, 1),
                false,
                dv.data_mut(),
                base,
                (mi, 1),
            );
            for (pr, dr) in p.chunks_exact(s).zip(dp.chunks_exact_mut(s)) {
                softmax_backward_row(pr, dr);
            }
            // dQ_i = dS · K_i / √d_k, dK_i = dSᵀ · Q_i / √d_k
            gemm_view(
                (s, s, dk),
                scale,
                &dp,
                0,
                (si, 1),
                cache.k.data(),
                base,
                (mi, 1),
                false,
                dq.data_mut(),
                base,
                (mi, 1),
            );
            gemm_view(
                (s, s, dk),
                scale,
                &dp,
                0,
                (1, si),
                cache.q.data(),
                base,
                (mi, 1),
                false,
                dk_t.data_mut(),
                base,
                (mi, 1),
            );
        }
    }

    let mut dy = linear_backward(&cache.input, &w.wq, &dq, &mut grads.wq, &mut grads.bq)?;
    dy.add_assign(&linear_backward(&cache.input, &w.wk, &dk_t, &mut grads.wk, &mut grads.bk)?)?;
    dy.add_assign(&linear_backward(&cache.input, &w.wv, &dv, &mut grads.wv, &mut grads.bv)?)?;
    Ok(dy)
}

/// Returns `dY` and freshly allocated gradients for all weight arrays.
pub fn msa_backward<T: Scalar>(
    w: &MsaWeights<T>,
    cache: &MsaCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, MsaWeights<T>)> {
    let mut grads = MsaWeights::zeros(w.dim(), w.heads)?;
    let dy = msa_backward_into(w, cache, d_out, &mut grads)?;
    Ok((dy, grads))
}
