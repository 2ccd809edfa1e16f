//! Dense row-major tensors and the handful of kernels the network needs,
//! each with its reverse-mode counterpart.
//!
//! Row-wise ops (softmax, layer norm, bias add) treat a tensor of any rank
//! as `rows × cols` where `cols` is the last extent.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        validate_shape(shape).expect("tensor extents must be >= 1");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    /// Builds a 2-D tensor from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::of(v))).collect();
        Self::new(&[rows.len(), cols], data).expect("rows form a valid matrix")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Last extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    /// Product of all extents but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape("add", other)?;
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn mul_elem(&self, other: &Self) -> Result<Self> {
        self.same_shape("mul_elem", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect(),
        })
    }

    /// Adds `bias` (length `cols`) to every row in place.
    pub fn add_row_bias(&mut self, bias: &Self) -> Result<()> {
        let c = self.cols();
        if bias.len() != c {
            return Err(Error::dim("add_row_bias", &self.shape, &bias.shape));
        }
        for row in self.data.chunks_exact_mut(c) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column sums over all rows; the gradient of a broadcast row bias.
    pub fn sum_rows(&self) -> Self {
        let c = self.cols();
        let mut out = Self::zeros(&[c]);
        for row in self.data.chunks_exact(c) {
            for (o, &v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self> {
        let [r, c] = self.dims2("transpose")?;
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(Error::dim(op, &self.shape, &[0, 0])),
        }
    }

    fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Data(format!("tensor extents must be >= 1, got {shape:?}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Multiply-add accounting
// ---------------------------------------------------------------------------

thread_local! {
    static MATMUL_FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Instrumented count of matrix-product FLOPs (2 per multiply-add) issued
/// on the current thread.
pub mod flop_counter {
    use super::MATMUL_FLOPS;

    pub fn reset() {
        MATMUL_FLOPS.with(|c| c.set(0));
    }

    pub fn read() -> u64 {
        MATMUL_FLOPS.with(|c| c.get())
    }

    pub(crate) fn add(m: usize, k: usize, n: usize) {
        MATMUL_FLOPS.with(|c| c.set(c.get() + 2 * (m * k * n) as u64));
    }
}

/// Operand layout for the strided product helpers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

/// `out (+)= op(a) · op(b)` on raw row-major buffers; `a` is stored as
/// `a_rows × a_cols`, likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_raw<T: Scalar>(
    a: &[T],
    (a_rows, a_cols): (usize, usize),
    a_layout: Layout,
    b: &[T],
    (b_rows, b_cols): (usize, usize),
    b_layout: Layout,
    out: &mut [T],
    accumulate: bool,
) {
    let (m, k, a_strides) = match a_layout {
        Layout::Normal => (a_rows, a_cols, (a_cols as isize, 1)),
        Layout::Transposed => (a_cols, a_rows, (1, a_cols as isize)),
    };
    let (k2, n, b_strides) = match b_layout {
        Layout::Normal => (b_rows, b_cols, (b_cols as isize, 1)),
        Layout::Transposed => (b_cols, b_rows, (1, b_cols as isize)),
    };
    debug_assert_eq!(k, k2);
    flop_counter::add(m, k, n);
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, a_strides, b, b_strides, beta, out, (n as isize, 1));
}

// ---------------------------------------------------------------------------
// Forward kernels
// ---------------------------------------------------------------------------

/// Matrix product of two 2-D tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_raw(
        &a.data,
        (m, k),
        Layout::Normal,
        &b.data,
        (k, n),
        Layout::Normal,
        &mut out.data,
        false,
    );
    Ok(out)
}

/// Affine map over the last axis: `x · w + bias`, keeping leading extents.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [k, n] = w.dims2("linear")?;
    if x.cols() != k || bias.len() != n {
        return Err(Error::dim("linear", &x.shape, &w.shape));
    }
    let rows = x.rows();
    let mut shape = x.shape.clone();
    *shape.last_mut().expect("rank >= 1") = n;
    let mut out = Tensor::zeros(&shape);
    gemm_raw(
        &x.data,
        (rows, k),
        Layout::Normal,
        &w.data,
        (k, n),
        Layout::Normal,
        &mut out.data,
        false,
    );
    out.add_row_bias(bias)?;
    Ok(out)
}

/// Gradients of [`linear`]: accumulates into `dw`/`db` and returns `dx`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    d_out: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let [k, n] = w.dims2("linear_backward")?;
    if d_out.cols() != n || x.cols() != k || d_out.rows() != x.rows() {
        return Err(Error::dim("linear_backward", &x.shape, &d_out.shape));
    }
    let rows = x.rows();
    gemm_raw(
        &x.data,
        (rows, k),
        Layout::Transposed,
        &d_out.data,
        (rows, n),
        Layout::Normal,
        &mut dw.data,
        true,
    );
    db.add_assign(&d_out.sum_rows())?;
    let mut dx = Tensor::zeros(&x.shape);
    gemm_raw(
        &d_out.data,
        (rows, n),
        Layout::Normal,
        &w.data,
        (k, n),
        Layout::Transposed,
        &mut dx.data,
        false,
    );
    Ok(dx)
}

/// Row-wise softmax with max subtraction. NaN inputs propagate.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data.chunks_exact_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let max = if max.is_finite() { max } else { T::zero() };
    for v in row.iter_mut() {
        *v -= max;
    }
    T::exp_slice(row);
    let inv = T::one() / row.iter().copied().sum::<T>();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Row statistics kept by [`layer_norm`] for its backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-row standardization with population variance, then `gamma·x + beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let m = x.cols();
    if gamma.len() != m || beta.len() != m {
        return Err(Error::dim("layer_norm", &x.shape, &gamma.shape));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer norm eps must be > 0, got {eps}")));
    }
    let eps = T::of(eps);
    let inv_m = T::one() / T::of_usize(m);
    let mut normalized = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for (xr, yr) in normalized
        .data
        .chunks_exact_mut(m)
        .zip(out.data.chunks_exact_mut(m))
    {
        let mean = xr.iter().copied().sum::<T>() * inv_m;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
        let istd = T::one() / (var + eps).sqrt();
        for (j, (h, y)) in xr.iter_mut().zip(yr.iter_mut()).enumerate() {
            *h = (*h - mean) * istd;
            *y = gamma.data[j] * *h + beta.data[j];
        }
        inv_std.push(istd);
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Exact GELU, `x·Φ(x)` with the erf-based normal CDF.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    gelu_with_cdf(x).0
}

/// GELU plus `Φ(x)`, which [`gelu_backward_from_cdf`] reuses.
pub fn gelu_with_cdf<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let cdf = normal_cdf(x);
    let y = Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().zip(&cdf.data).map(|(&v, &c)| v * c).collect(),
    };
    (y, cdf)
}

fn normal_cdf<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut c = x.map(|v| v * T::of(std::f64::consts::FRAC_1_SQRT_2));
    T::erf_slice(&mut c.data);
    let half = T::of(0.5);
    for v in c.data.iter_mut() {
        *v = half * (T::one() + *v);
    }
    c
}

#[cfg(test)]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Saved dropout decision. `Identity` covers inference and `p = 0`.
#[derive(Debug, Clone, PartialEq)]
pub enum DropoutMask<T> {
    Identity,
    /// Per-element factor: 0 for dropped, `1/(1-p)` for kept.
    Factors(Vec<T>),
}

impl<T: Scalar> DropoutMask<T> {
    /// Keep flags for `len` elements; all true for the identity mask.
    pub fn keep_flags(&self, len: usize) -> Vec<bool> {
        match self {
            DropoutMask::Identity => vec![true; len],
            DropoutMask::Factors(f) => f.iter().map(|v| *v != T::zero()).collect(),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            DropoutMask::Identity => x.clone(),
            DropoutMask::Factors(f) => Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().zip(f).map(|(&v, &k)| v * k).collect(),
            },
        }
    }
}

pub fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// Inverted dropout. Draws one 32-bit word per element only when it can
/// drop; an element is dropped when its word falls below `p·2³²`.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    p: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    check_probability("dropout probability", p)?;
    if !training || p == 0.0 {
        return Ok((x.clone(), DropoutMask::Identity));
    }
    let scale = T::of(1.0 / (1.0 - p));
    let threshold = (p * 4_294_967_296.0) as u64;
    let mut words = vec![0u32; x.len()];
    rng.fill_u32(&mut words);
    let factors: Vec<T> = words
        .iter()
        .map(|&w| if (w as u64) < threshold { T::zero() } else { scale })
        .collect();
    let mask = DropoutMask::Factors(factors);
    Ok((mask.apply(x), mask))
}

// ---------------------------------------------------------------------------
// Backward kernels
// ---------------------------------------------------------------------------

/// `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [m, k] = a.dims2("matmul_backward")?;
    let [_, n] = b.dims2("matmul_backward")?;
    if d_out.shape != [m, n] || b.shape[0] != k {
        return Err(Error::dim("matmul_backward", &d_out.shape, &[m, n]));
    }
    let mut da = Tensor::zeros(&[m, k]);
    gemm_raw(
        &d_out.data,
        (m, n),
        Layout::Normal,
        &b.data,
        (k, n),
        Layout::Transposed,
        &mut da.data,
        false,
    );
    let mut db = Tensor::zeros(&[k, n]);
    gemm_raw(
        &a.data,
        (m, k),
        Layout::Transposed,
        &d_out.data,
        (m, n),
        Layout::Normal,
        &mut db.data,
        false,
    );
    Ok((da, db))
}

/// Takes the softmax *output*.
pub fn softmax_rows_backward<T: Scalar>(out: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    out.same_shape("softmax_backward", d_out)?;
    let mut dx = d_out.clone();
    let c = out.cols();
    for (y, dy) in out.data.chunks_exact(c).zip(dx.data.chunks_exact_mut(c)) {
        softmax_backward_row(y, dy);
    }
    Ok(dx)
}

/// In-place: `dy` becomes the input gradient.
pub(crate) fn softmax_backward_row<T: Scalar>(y: &[T], dy: &mut [T]) {
    let dot: T = y.iter().zip(dy.iter()).map(|(&a, &b)| a * b).sum();
    for (g, &p) in dy.iter_mut().zip(y) {
        *g = p * (*g - dot);
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    cache.normalized.same_shape("layer_norm_backward", d_out)?;
    let m = d_out.cols();
    let inv_m = T::one() / T::of_usize(m);
    let mut dx = Tensor::zeros(&d_out.shape);
    let mut dgamma = Tensor::zeros(&[m]);
    let dbeta = d_out.sum_rows();
    let mut dxhat = vec![T::zero(); m];
    for (r, ((h, dy), out)) in cache
        .normalized
        .data
        .chunks_exact(m)
        .zip(d_out.data.chunks_exact(m))
        .zip(dx.data.chunks_exact_mut(m))
        .enumerate()
    {
        let mut sum_d = T::zero();
        let mut sum_dh = T::zero();
        for j in 0..m {
            dgamma.data[j] += dy[j] * h[j];
            dxhat[j] = dy[j] * gamma.data[j];
            sum_d += dxhat[j];
            sum_dh += dxhat[j] * h[j];
        }
        let istd = cache.inv_std[r];
        for j in 0..m {
            out[j] = istd * (dxhat[j] - inv_m * sum_d - h[j] * inv_m * sum_dh);
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Takes the GELU *input*.
pub fn gelu_backward<T: Scalar>(input: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    gelu_backward_from_cdf(input, &normal_cdf(input), d_out)
}

/// `d·(Φ(x) + x·φ(x))` with `Φ(x)` saved by [`gelu_with_cdf`].
pub fn gelu_backward_from_cdf<T: Scalar>(input: &Tensor<T>, cdf: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.same_shape("gelu_backward", d_out)?;
    input.same_shape("gelu_backward", cdf)?;
    let mut pdf = input.map(|x| -(x * x) * T::of(0.5));
    T::exp_slice(&mut pdf.data);
    let k = T::of(0.398_942_280_401_432_7);
    for (((p, &x), &c), &g) in pdf.data.iter_mut().zip(&input.data).zip(&cdf.data).zip(&d_out.data) {
        *p = g * (c + x * k * *p);
    }
    Ok(pdf)
}

pub fn dropout_backward<T: Scalar>(mask: &DropoutMask<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if let DropoutMask::Factors(f) = mask {
        if f.len() != d_out.len() {
            return Err(Error::Contract(format!(
                "dropout mask covers {} elements, gradient has {}",
                f.len(),
                d_out.len()
            )));
        }
    }
    Ok(mask.apply(d_out))
}

// ---------------------------------------------------------------------------
// Uniform dispatch
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Matmul,
    SoftmaxRows,
    LayerNorm,
    Gelu,
    Dropout,
    Add,
    Transpose,
}

/// Forward activations needed to differentiate one op.
#[derive(Debug, Clone)]
pub enum OpCache<T> {
    Matmul { a: Tensor<T>, b: Tensor<T> },
    SoftmaxRows { out: Tensor<T> },
    LayerNorm { cache: LayerNormCache<T>, gamma: Tensor<T> },
    Gelu { input: Tensor<T> },
    Dropout { mask: DropoutMask<T> },
    Add,
    Transpose,
}

impl<T> OpCache<T> {
    pub fn op(&self) -> Op {
        match self {
            OpCache::Matmul { .. } => Op::Matmul,
            OpCache::SoftmaxRows { .. } => Op::SoftmaxRows,
            OpCache::LayerNorm { .. } => Op::LayerNorm,
            OpCache::Gelu { .. } => Op::Gelu,
            OpCache::Dropout { .. } => Op::Dropout,
            OpCache::Add => Op::Add,
            OpCache::Transpose => Op::Transpose,
        }
    }
}

/// Vector-Jacobian products of `op` for every differentiable input, in
/// argument order (`layer_norm` yields `[dx, dgamma, dbeta]`).
pub fn backward_of<T: Scalar>(op: Op, cache: &OpCache<T>, d_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    if cache.op() != op {
        return Err(Error::Contract(format!(
            "backward for {op:?} given a cache recorded by {:?}",
            cache.op()
        )));
    }
    Ok(match cache {
        OpCache::Matmul { a, b } => {
            let (da, db) = matmul_backward(a, b, d_out)?;
            vec![da, db]
        }
        OpCache::SoftmaxRows { out } => vec![softmax_rows_backward(out, d_out)?],
        OpCache::LayerNorm { cache, gamma } => {
            let (dx, dg, db) = layer_norm_backward(cache, gamma, d_out)?;
            vec![dx, dg, db]
        }
        OpCache::Gelu { input } => vec![gelu_backward(input, d_out)?],
        OpCache::Dropout { mask } => vec![dropout_backward(mask, d_out)?],
        OpCache::Add => vec![d_out.clone(), d_out.clone()],
        OpCache::Transpose => vec![d_out.transpose()?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_examples() {
        let m = t(&[&[1.5, -2.0], &[0.25, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);

        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), t(&[&[17.0], &[39.0]]));

        let z = Tensor::<f64>::zeros(&[3, 4]);
        let any = Tensor::from_fn(&[4, 2], |i| i as f64 - 3.0);
        assert_eq!(matmul(&z, &any).unwrap(), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn rejects_zero_extents() {
        assert!(Tensor::<f32>::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_rows(&t(&[&[0.0, 0.0, 0.0, 0.0]]));
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        // exp(k) / (e + e^2 + e^3), evaluated directly.
        let s = softmax_rows(&t(&[&[1.0, 2.0, 3.0]]));
        let denom: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        for k in 0..3 {
            let want = ((k + 1) as f64).exp() / denom;
            assert!((s.data()[k] - want).abs() < 1e-15);
        }
        assert!((s.data()[0] - 0.09003).abs() < 1e-5);
        assert!((s.data()[1] - 0.24473).abs() < 1e-5);
        assert!((s.data()[2] - 0.66524).abs() < 1e-5);

        let shifted = softmax_rows(&t(&[&[1001.0, 1002.0, 1003.0]]));
        assert!(shifted.max_abs_diff(&s) < 1e-12);
    }

    #[test]
    fn softmax_propagates_nan() {
        let s = softmax_rows(&t(&[&[f64::NAN, 1.0]]));
        assert!(s.data().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::<f64>::ones(&[4]);
        let zeros = Tensor::<f64>::zeros(&[4]);
        let (y, _) = layer_norm(&t(&[&[3.0, 3.0, 3.0, 3.0]]), &ones, &zeros, LN_EPS).unwrap();
        assert!(y.max_abs() < 1e-10);

        let (y, _) = layer_norm(
            &t(&[&[1.0, 3.0]]),
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            1e-12,
        )
        .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        let beta = Tensor::from_fn(&[3], |i| i as f64 * 0.5 - 1.0);
        let x = Tensor::from_fn(&[2, 3], |i| (i * i) as f64);
        let (y, _) = layer_norm(&x, &Tensor::zeros(&[3]), &beta, LN_EPS).unwrap();
        for r in 0..2 {
            assert_eq!(y.row(r), beta.data());
        }
        assert!(layer_norm(&x, &Tensor::ones(&[3]), &beta, 0.0).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu_scalar(1.0f64) - 0.84134).abs() < 1e-5);
        // x·Φ(x) − (−x)·Φ(−x) = x·(Φ(x) + Φ(−x)) = x
        for &x in &[-3.0, -0.7, 0.2, 1.9, 5.0f64] {
            assert!((gelu_scalar(x) - gelu_scalar(-x) - x).abs() < 1e-12);
        }
        let g = gelu_backward(&t(&[&[0.0]]), &t(&[&[1.0]])).unwrap();
        assert_eq!(g.data()[0], 0.5);
    }

    #[test]
    fn dropout_examples() {
        let x = Tensor::<f32>::from_fn(&[4, 5], |i| i as f32);
        let mut rng = Rng::new(3);
        let (y, mask) = dropout(&x, 0.0, &mut rng, true).unwrap();
        assert_eq!(y, x);
        assert_eq!(mask.keep_flags(20), vec![true; 20]);
        let (y, _) = dropout(&x, 0.7, &mut rng, false).unwrap();
        assert_eq!(y, x);
        assert!(dropout(&x, 1.0, &mut rng, true).is_err());
        assert!(dropout(&x, -0.1, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let n = 1_000_000;
        let x = Tensor::<f32>::ones(&[n]);
        let (y, mask) = dropout(&x, 0.5, &mut Rng::new(11), true).unwrap();
        let kept = mask.keep_flags(n).iter().filter(|&&k| k).count();
        let frac = kept as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.003, "{frac}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_masks_reproduce() {
        let x = Tensor::<f32>::ones(&[257]);
        let (_, a) = dropout(&x, 0.3, &mut Rng::new(99), true).unwrap();
        let (_, b) = dropout(&x, 0.3, &mut Rng::new(99), true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matmul_backward_identity_seed() {
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 + 1.0);
        let b = Tensor::<f64>::from_fn(&[3, 2], |i| 0.5 * i as f64 - 1.0);
        let grads = backward_of(
            Op::Matmul,
            &OpCache::Matmul { a: a.clone(), b: b.clone() },
            &Tensor::eye(2),
        )
        .unwrap();
        assert_eq!(grads[0], b.transpose().unwrap());
        assert_eq!(grads[1], a.transpose().unwrap());
    }

    #[test]
    fn backward_of_rejects_mismatched_cache() {
        let cache = OpCache::<f64>::Gelu { input: Tensor::zeros(&[2]) };
        let err = backward_of(Op::SoftmaxRows, &cache, &Tensor::zeros(&[2])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn flop_counter_counts_matmuls() {
        flop_counter::reset();
        matmul(&Tensor::<f32>::zeros(&[3, 4]), &Tensor::zeros(&[4, 5])).unwrap();
        assert_eq!(flop_counter::read(), 2 * 3 * 4 * 5);
    }
}
