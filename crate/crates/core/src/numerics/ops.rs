//! Slice kernels shared by the encoder, the prompt pool and the classifier.
//! Matrices are row-major; shapes are passed explicitly.

use super::Real;

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

#[inline]
pub fn norm<F: Real>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(F::zero());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip != F::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

/// `out[k×n] += aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != F::zero() {
                axpy(aip, brow, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

/// `out[m×k] = a[m×n] · bᵀ` with `b[k×n]`.
pub fn matmul_nt<F: Real>(a: &[F], b: &[F], m: usize, n: usize, k: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

pub fn add_row_bias<F: Real>(x: &mut [F], bias: &[F]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

/// `out += Σ_rows x`
pub fn col_sum_acc<F: Real>(x: &[F], out: &mut [F]) {
    let n = out.len();
    for row in x.chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_inplace<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

pub fn softmax<F: Real>(row: &[F]) -> Vec<F> {
    let mut out = row.to_vec();
    softmax_inplace(&mut out);
    out
}

/// Log-sum-exp of one row.
pub fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Per-row statistics kept by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm; returns output and cache.
pub fn layer_norm<F: Real>(x: &[F], gamma: &[F], beta: &[F]) -> (Vec<F>, NormCache<F>) {
    let d = gamma.len();
    let rows = x.len() / d;
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = F::one() / F::of(d as f64);
    let eps = F::of(LN_EPS);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (out, NormCache { xhat, rstd })
}

/// Backward of [`layer_norm`]. Accumulates parameter gradients when given
/// and returns the input gradient.
pub fn layer_norm_backward<F: Real>(
    dout: &[F],
    cache: &NormCache<F>,
    gamma: &[F],
    dgamma: Option<&mut [F]>,
    dbeta: Option<&mut [F]>,
) -> Vec<F> {
    let d = gamma.len();
    let rows = dout.len() / d;
    if let Some(dg) = dgamma {
        for r in 0..rows {
            for j in 0..d {
                dg[j] = dg[j] + dout[r * d + j] * cache.xhat[r * d + j];
            }
        }
    }
    if let Some(db) = dbeta {
        col_sum_acc(dout, db);
    }
    let mut dx = vec![F::zero(); dout.len()];
    let inv_d = F::one() / F::of(d as f64);
    for r in 0..rows {
        let mut mean_dh = F::zero();
        let mut mean_dh_h = F::zero();
        for j in 0..d {
            let dh = dout[r * d + j] * gamma[j];
            mean_dh = mean_dh + dh;
            mean_dh_h = mean_dh_h + dh * cache.xhat[r * d + j];
        }
        mean_dh = mean_dh * inv_d;
        mean_dh_h = mean_dh_h * inv_d;
        let rs = cache.rstd[r];
        for j in 0..d {
            let i = r * d + j;
            let dh = dout[i] * gamma[j];
            dx[i] = rs * (dh - mean_dh - cache.xhat[i] * mean_dh_h);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + F::of(3.0) * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}
