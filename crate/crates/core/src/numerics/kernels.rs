use rayon::prelude::*;

use super::{Float, PrecisionMode, Tensor};
use crate::error::{JetError, Result};

// Below this many multiply-adds the product runs serially.
const PAR_THRESHOLD: usize = 1 << 18;

/// Matrix product `a · b`.
///
/// `b` must be rank 2. `a` may have any rank ≥ 2; its leading axes are
/// treated as rows, so a `[B, T, K]` activation times a `[K, N]` weight gives
/// `[B, T, N]`.
pub fn matmul<F: Float>(a: &Tensor<F>, b: &Tensor<F>, mode: PrecisionMode) -> Result<Tensor<F>> {
    if a.rank() < 2 || b.rank() != 2 {
        return Err(JetError::shape(
            "matmul",
            format!(
                "need rank>=2 times rank 2, got {:?} x {:?}",
                a.shape(),
                b.shape()
            ),
        ));
    }
    let k = a.last_dim();
    if b.shape()[0] != k {
        return Err(JetError::shape(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let n = b.shape()[1];
    let m = a.numel() / k.max(1);
    let mut out = vec![F::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n, mode);
    let mut shape = a.shape()[..a.rank() - 1].to_vec();
    shape.push(n);
    Tensor::new(&shape, out)
}

pub(crate) fn matmul_into<F: Float>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    mode: PrecisionMode,
) {
    if n == 0 || m == 0 {
        return;
    }
    let row = |(i, c): (usize, &mut [F])| {
        let a_row = &a[i * k..(i + 1) * k];
        match mode {
            PrecisionMode::Full => row_full(a_row, b, c, n),
            PrecisionMode::Fast => row_fast(a_row, b, c, n),
        }
    };
    if m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

// c[j] accumulates a[p]*b[p][j] for p = 0, 1, ... in order: the same
// sequence of roundings as the scalar triple loop.
fn row_full<F: Float>(a_row: &[F], b: &[F], c: &mut [F], n: usize) {
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (cj, &bv) in c.iter_mut().zip(b_row) {
            *cj += av * bv;
        }
    }
}

// Four inner indices are combined before touching the accumulator.
fn row_fast<F: Float>(a_row: &[F], b: &[F], c: &mut [F], n: usize) {
    let k = a_row.len();
    let mut p = 0;
    while p + 4 <= k {
        let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
        let b0 = &b[p * n..(p + 1) * n];
        let b1 = &b[(p + 1) * n..(p + 2) * n];
        let b2 = &b[(p + 2) * n..(p + 3) * n];
        let b3 = &b[(p + 3) * n..(p + 4) * n];
        for j in 0..n {
            c[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
        }
        p += 4;
    }
    while p < k {
        let av = a_row[p];
        let b_row = &b[p * n..(p + 1) * n];
        for (cj, &bv) in c.iter_mut().zip(b_row) {
            *cj += av * bv;
        }
        p += 1;
    }
}

/// Scalar triple loop over 2-D operands, summing the inner index in order.
/// This is the reference `PrecisionMode::Full` has to reproduce bitwise.
pub fn matmul_reference<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(JetError::shape(
            "matmul_reference",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = F::zero();
            for p in 0..k {
                acc += ad[i * k + p] * bd[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(&[m, n], out)
}

pub(crate) fn sigmoid_scalar<F: Float>(x: F) -> F {
    // Split on sign so exp never overflows.
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn log_sigmoid_scalar<F: Float>(x: F) -> F {
    // log σ(x) = min(x, 0) - log(1 + exp(-|x|))
    x.min(F::zero()) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn gelu_scalar<F: Float>(x: F) -> F {
    let half = F::of(0.5);
    x * half * (F::one() + (x * F::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad_scalar<F: Float>(x: F) -> F {
    let half = F::of(0.5);
    let cdf = half * (F::one() + (x * F::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * F::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Element-wise logistic function.
pub fn sigmoid<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    x.map(sigmoid_scalar)
}

/// Element-wise `log σ(x)`, stable for large |x|.
pub fn log_sigmoid<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    x.map(log_sigmoid_scalar)
}

/// Exact erf-based GELU, `x · Φ(x)`.
pub fn gelu<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

/// Normalized rows and reciprocal standard deviations, as needed by backward.
pub(crate) struct LayerNormParts<F> {
    pub y: Tensor<F>,
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub(crate) fn layer_norm_parts<F: Float>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<LayerNormParts<F>> {
    let w = x.last_dim();
    if gain.shape() != [w] || bias.shape() != [w] {
        return Err(JetError::shape(
            "layer_norm",
            format!(
                "input {:?}, gain {:?}, bias {:?}",
                x.shape(),
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    if eps <= F::zero() {
        return Err(JetError::config("layer_norm eps must be positive"));
    }
    let rows = x.numel() / w.max(1);
    let wf = F::from_usize(w).unwrap();
    let mut y = vec![F::zero(); x.numel()];
    let mut xhat = vec![F::zero(); x.numel()];
    let mut rstd = Vec::with_capacity(rows);
    let (g, b) = (gain.data(), bias.data());
    for r in 0..rows {
        let row = &x.data()[r * w..(r + 1) * w];
        let mean = row.iter().copied().sum::<F>() / wf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / wf;
        let rs = F::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..w {
            let h = (row[j] - mean) * rs;
            xhat[r * w + j] = h;
            y[r * w + j] = h * g[j] + b[j];
        }
    }
    Ok(LayerNormParts {
        y: Tensor::new(x.shape(), y)?,
        xhat,
        rstd,
    })
}

/// Per-row zero-mean unit-variance normalization followed by `gain`/`bias`.
pub fn layer_norm<F: Float>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    Ok(layer_norm_parts(x, gain, bias, eps)?.y)
}

/// Softmax over the last axis.
pub fn softmax_rows<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let w = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(w.max(1)) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

pub(crate) fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
