//! One pre-LN transformer block with optional prefix key/value tokens.
//!
//! ```text
//! a  = LN1(x)
//! x1 = x + Attention(a·Wq, [p_k; a]·Wk, [p_v; a]·Wv)·Wo
//! x2 = x1 + GELU(LN2(x1)·W1 + b1)·W2 + b2
//! ```
//!
//! Prefix rows are concatenated in embedding space before the key and value
//! projections. Queries come from `x` only, so the output length is `n`.

use super::params::LayerParams;
use crate::error::{Error, Result};
use crate::numerics::ops::{
    add_row_bias, col_sum_acc, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul,
    matmul_nt, matmul_tn_acc, softmax_inplace, NormCache,
};
use crate::numerics::{Real, Tensor};

/// Prefix key/value tokens injected at one layer: `rows × dim` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Prefix<F> {
    pub pk: Vec<F>,
    pub pv: Vec<F>,
    pub rows: usize,
}

impl<F: Real> Prefix<F> {
    pub fn empty() -> Self {
        Prefix {
            pk: Vec::new(),
            pv: Vec::new(),
            rows: 0,
        }
    }

    /// Splits an `m × dim` prompt into equal key and value halves.
    pub fn from_prompt(prompt: &[F], m: usize, dim: usize) -> Result<Self> {
        if !m.is_multiple_of(2) {
            return Err(Error::Config(format!("prompt length {m} must be even")));
        }
        if prompt.len() != m * dim {
            return Err(Error::Contract(format!(
                "prompt has {} values, expected {m}×{dim}",
                prompt.len()
            )));
        }
        let half = m / 2 * dim;
        Ok(Prefix {
            pk: prompt[..half].to_vec(),
            pv: prompt[half..].to_vec(),
            rows: m / 2,
        })
    }

    /// Appends another prefix after this one along the token axis.
    pub fn extend(&mut self, other: &Prefix<F>) {
        self.pk.extend_from_slice(&other.pk);
        self.pv.extend_from_slice(&other.pv);
        self.rows += other.rows;
    }
}

/// Gradient with respect to a [`Prefix`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixGrad<F> {
    pub dpk: Vec<F>,
    pub dpv: Vec<F>,
    pub rows: usize,
}

/// Borrowed attention projections.
#[derive(Clone, Copy)]
pub struct AttentionWeights<'a, F> {
    pub wq: &'a [F],
    pub bq: &'a [F],
    pub wk: &'a [F],
    pub wv: &'a [F],
    pub bv: &'a [F],
    pub wo: &'a [F],
    pub bo: &'a [F],
}

impl<'a, F: Real> AttentionWeights<'a, F> {
    pub fn of_layer(p: &'a LayerParams<F>) -> Self {
        AttentionWeights {
            wq: p.wq.data(),
            bq: p.bq.data(),
            wk: p.wk.data(),
            wv: p.wv.data(),
            bv: p.bv.data(),
            wo: p.wo.data(),
            bo: p.bo.data(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache<F> {
    kin: Vec<F>,
    vin: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
    prefix_rows: usize,
}

fn concat_rows<F: Real>(prefix: &[F], x: &[F]) -> Vec<F> {
    let mut out = Vec::with_capacity(prefix.len() + x.len());
    out.extend_from_slice(prefix);
    out.extend_from_slice(x);
    out
}

pub(crate) fn attention_forward<F: Real>(
    a: &[F],
    n: usize,
    dim: usize,
    heads: usize,
    prefix: Option<&Prefix<F>>,
    w: AttentionWeights<'_, F>,
) -> (Vec<F>, AttnCache<F>) {
    let empty = Prefix::empty();
    let prefix = prefix.unwrap_or(&empty);
    let r = prefix.rows;
    let total = r + n;
    let dh = dim / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();

    let mut q = vec![F::zero(); n * dim];
    matmul(a, w.wq, n, dim, dim, &mut q);
    add_row_bias(&mut q, w.bq);
    let kin = concat_rows(&prefix.pk, a);
    let vin = concat_rows(&prefix.pv, a);
    let mut k = vec![F::zero(); total * dim];
    matmul(&kin, w.wk, total, dim, dim, &mut k);
    let mut v = vec![F::zero(); total * dim];
    matmul(&vin, w.wv, total, dim, dim, &mut v);
    add_row_bias(&mut v, w.bv);

    let mut probs = vec![F::zero(); heads * n * total];
    let mut ctx = vec![F::zero(); n * dim];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &q[i * dim + off..i * dim + off + dh];
            let row = &mut probs[(h * n + i) * total..(h * n + i + 1) * total];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k[j * dim + off..j * dim + off + dh]) * scale;
            }
            softmax_inplace(row);
            let ci = &mut ctx[i * dim + off..i * dim + off + dh];
            for (j, &pij) in row.iter().enumerate() {
                let vj = &v[j * dim + off..j * dim + off + dh];
                for c in 0..dh {
                    ci[c] = ci[c] + pij * vj[c];
                }
            }
        }
    }
    let mut out = vec![F::zero(); n * dim];
    matmul(&ctx, w.wo, n, dim, dim, &mut out);
    add_row_bias(&mut out, w.bo);
    (
        out,
        AttnCache {
            kin,
            vin,
            q,
            k,
            v,
            probs,
            ctx,
            prefix_rows: r,
        },
    )
}

/// Mutable gradient slots for the attention projections.
pub(crate) struct AttnGrads<'a, F> {
    pub wq: &'a mut [F],
    pub bq: &'a mut [F],
    pub wk: &'a mut [F],
    pub wv: &'a mut [F],
    pub bv: &'a mut [F],
    pub wo: &'a mut [F],
    pub bo: &'a mut [F],
}

/// Returns the gradient with respect to the attention input `a` and, when the
/// forward pass had a prefix, the prefix gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<F: Real>(
    dout: &[F],
    cache: &AttnCache<F>,
    a: &[F],
    n: usize,
    dim: usize,
    heads: usize,
    w: AttentionWeights<'_, F>,
    mut grads: Option<AttnGrads<'_, F>>,
) -> (Vec<F>, Option<PrefixGrad<F>>) {
    let r = cache.prefix_rows;
    let total = r + n;
    let dh = dim / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();

    if let Some(g) = grads.as_mut() {
        matmul_tn_acc(&cache.ctx, dout, n, dim, dim, g.wo);
        col_sum_acc(dout, g.bo);
    }
    let mut dctx = vec![F::zero(); n * dim];
    matmul_nt(dout, w.wo, n, dim, dim, &mut dctx);

    let mut dq = vec![F::zero(); n * dim];
    let mut dk = vec![F::zero(); total * dim];
    let mut dv = vec![F::zero(); total * dim];
    let mut dp = vec![F::zero(); total];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let p = &cache.probs[(h * n + i) * total..(h * n + i + 1) * total];
            let dci = &dctx[i * dim + off..i * dim + off + dh];
            let mut weighted = F::zero();
            for j in 0..total {
                let vj = &cache.v[j * dim + off..j * dim + off + dh];
                dp[j] = dot(dci, vj);
                weighted = weighted + p[j] * dp[j];
                let dvj = &mut dv[j * dim + off..j * dim + off + dh];
                for c in 0..dh {
                    dvj[c] = dvj[c] + p[j] * dci[c];
                }
            }
            let qi = &cache.q[i * dim + off..i * dim + off + dh];
            for j in 0..total {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == F::zero() {
                    continue;
                }
                let kj = &cache.k[j * dim + off..j * dim + off + dh];
                let dqi = &mut dq[i * dim + off..i * dim + off + dh];
                for c in 0..dh {
                    dqi[c] = dqi[c] + ds * kj[c];
                }
                let dkj = &mut dk[j * dim + off..j * dim + off + dh];
                for c in 0..dh {
                    dkj[c] = dkj[c] + ds * qi[c];
                }
            }
        }
    }

    if let Some(g) = grads.as_mut() {
        matmul_tn_acc(a, &dq, n, dim, dim, g.wq);
        col_sum_acc(&dq, g.bq);
        matmul_tn_acc(&cache.kin, &dk, total, dim, dim, g.wk);
        matmul_tn_acc(&cache.vin, &dv, total, dim, dim, g.wv);
        col_sum_acc(&dv, g.bv);
    }
    let mut da = vec![F::zero(); n * dim];
    matmul_nt(&dq, w.wq, n, dim, dim, &mut da);
    let mut dkin = vec![F::zero(); total * dim];
    matmul_nt(&dk, w.wk, total, dim, dim, &mut dkin);
    let mut dvin = vec![F::zero(); total * dim];
    matmul_nt(&dv, w.wv, total, dim, dim, &mut dvin);
    for (i, d) in da.iter_mut().enumerate() {
        *d = *d + dkin[r * dim + i] + dvin[r * dim + i];
    }
    let prefix_grad = (r > 0).then(|| PrefixGrad {
        dpk: dkin[..r * dim].to_vec(),
        dpv: dvin[..r * dim].to_vec(),
        rows: r,
    });
    (da, prefix_grad)
}

/// Owned attention weights for standalone use of [`attention_with_prefix`].
#[derive(Debug, Clone)]
pub struct AttentionParams<F> {
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
}

impl<F: Real> AttentionParams<F> {
    /// All projections identity, all biases zero.
    pub fn identity(dim: usize) -> Self {
        let mut eye = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = F::one();
        }
        AttentionParams {
            wq: eye.clone(),
            bq: Tensor::zeros(&[dim]),
            wk: eye.clone(),
            wv: eye.clone(),
            bv: Tensor::zeros(&[dim]),
            wo: eye,
            bo: Tensor::zeros(&[dim]),
        }
    }

    fn weights(&self) -> AttentionWeights<'_, F> {
        AttentionWeights {
            wq: self.wq.data(),
            bq: self.bq.data(),
            wk: self.wk.data(),
            wv: self.wv.data(),
            bv: self.bv.data(),
            wo: self.wo.data(),
            bo: self.bo.data(),
        }
    }
}

/// Multi-head attention with queries from `x` (`n × dim`) and keys/values
/// from `[p_k; x]`, `[p_v; x]` (`(r+n) × dim`). No mask.
pub fn attention_with_prefix<F: Real>(
    x: &Tensor<F>,
    pk: &Tensor<F>,
    pv: &Tensor<F>,
    weights: &AttentionParams<F>,
    heads: usize,
) -> Result<Tensor<F>> {
    let dim = x.cols();
    let n = x.rows();
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "dim {dim} not divisible by {heads} heads"
        )));
    }
    if pk.shape() != pv.shape() || (!pk.is_empty() && pk.cols() != dim) {
        return Err(Error::Contract(format!(
            "prefix shapes {:?}/{:?} inconsistent with dim {dim}",
            pk.shape(),
            pv.shape()
        )));
    }
    let prefix = Prefix {
        pk: pk.data().to_vec(),
        pv: pv.data().to_vec(),
        rows: if pk.is_empty() { 0 } else { pk.rows() },
    };
    let (out, _) = attention_forward(x.data(), n, dim, heads, Some(&prefix), weights.weights());
    Tensor::from_vec(&[n, dim], out)
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache<F> {
    ln1: NormCache<F>,
    a: Vec<F>,
    attn: AttnCache<F>,
    ln2: NormCache<F>,
    b: Vec<F>,
    u: Vec<F>,
    g: Vec<F>,
}

pub(crate) fn block_forward<F: Real>(
    p: &LayerParams<F>,
    x: &[F],
    n: usize,
    dim: usize,
    heads: usize,
    prefix: Option<&Prefix<F>>,
) -> (Vec<F>, BlockCache<F>) {
    let ff = p.b1.len();
    let (a, ln1) = layer_norm(x, p.ln1_g.data(), p.ln1_b.data());
    let (attn_out, attn) =
        attention_forward(&a, n, dim, heads, prefix, AttentionWeights::of_layer(p));
    let x1: Vec<F> = x.iter().zip(&attn_out).map(|(&u, &v)| u + v).collect();
    let (b, ln2) = layer_norm(&x1, p.ln2_g.data(), p.ln2_b.data());
    let mut u = vec![F::zero(); n * ff];
    matmul(&b, p.w1.data(), n, dim, ff, &mut u);
    add_row_bias(&mut u, p.b1.data());
    let g: Vec<F> = u.iter().map(|&v| gelu(v)).collect();
    let mut y = vec![F::zero(); n * dim];
    matmul(&g, p.w2.data(), n, ff, dim, &mut y);
    add_row_bias(&mut y, p.b2.data());
    let out = x1.iter().zip(&y).map(|(&u, &v)| u + v).collect();
    (
        out,
        BlockCache {
            ln1,
            a,
            attn,
            ln2,
            b,
            u,
            g,
        },
    )
}

/// Backward through one block. Parameter gradients accumulate into `grads`
/// when given; the input gradient and any prefix gradient are returned.
pub(crate) fn block_backward<F: Real>(
    p: &LayerParams<F>,
    cache: &BlockCache<F>,
    dx2: &[F],
    n: usize,
    dim: usize,
    heads: usize,
    mut grads: Option<&mut LayerParams<F>>,
) -> (Vec<F>, Option<PrefixGrad<F>>) {
    let ff = p.b1.len();
    // feed-forward branch
    if let Some(g) = grads.as_deref_mut() {
        matmul_tn_acc(&cache.g, dx2, n, ff, dim, g.w2.data_mut());
        col_sum_acc(dx2, g.b2.data_mut());
    }
    let mut dg = vec![F::zero(); n * ff];
    matmul_nt(dx2, p.w2.data(), n, dim, ff, &mut dg);
    for (d, &u) in dg.iter_mut().zip(&cache.u) {
        *d = *d * gelu_grad(u);
    }
    if let Some(g) = grads.as_deref_mut() {
        matmul_tn_acc(&cache.b, &dg, n, dim, ff, g.w1.data_mut());
        col_sum_acc(&dg, g.b1.data_mut());
    }
    let mut db = vec![F::zero(); n * dim];
    matmul_nt(&dg, p.w1.data(), n, ff, dim, &mut db);
    let dx1_ln = match grads.as_deref_mut() {
        Some(g) => layer_norm_backward(
            &db,
            &cache.ln2,
            p.ln2_g.data(),
            Some(g.ln2_g.data_mut()),
            Some(g.ln2_b.data_mut()),
        ),
        None => layer_norm_backward(&db, &cache.ln2, p.ln2_g.data(), None, None),
    };
    let dx1: Vec<F> = dx2.iter().zip(&dx1_ln).map(|(&a, &b)| a + b).collect();

    // attention branch
    let attn_grads = grads.as_deref_mut().map(|g| AttnGrads {
        wq: g.wq.data_mut(),
        bq: g.bq.data_mut(),
        wk: g.wk.data_mut(),
        wv: g.wv.data_mut(),
        bv: g.bv.data_mut(),
        wo: g.wo.data_mut(),
        bo: g.bo.data_mut(),
    });
    let (da, prefix_grad) = attention_backward(
        &dx1,
        &cache.attn,
        &cache.a,
        n,
        dim,
        heads,
        AttentionWeights::of_layer(p),
        attn_grads,
    );
    let dx_ln = match grads {
        Some(g) => layer_norm_backward(
            &da,
            &cache.ln1,
            p.ln1_g.data(),
            Some(g.ln1_g.data_mut()),
            Some(g.ln1_b.data_mut()),
        ),
        None => layer_norm_backward(&da, &cache.ln1, p.ln1_g.data(), None, None),
    };
    let dx = dx1.iter().zip(&dx_ln).map(|(&a, &b)| a + b).collect();
    (dx, prefix_grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_single_token_prefix() {
        let x = Tensor::<f64>::from_f64(&[1, 1], &[1.0]).unwrap();
        let pk = Tensor::from_f64(&[1, 1], &[0.0]).unwrap();
        let pv = Tensor::from_f64(&[1, 1], &[2.0]).unwrap();
        let out = attention_with_prefix(&x, &pk, &pv, &AttentionParams::identity(1), 1).unwrap();
        // weights softmax([0, 1]) = [0.2689, 0.7311]
        let w0 = 1.0 / (1.0 + 1f64.exp());
        let expected = w0 * 2.0 + (1.0 - w0) * 1.0;
        assert!((out.data()[0] - expected).abs() < 1e-15);
        assert!((out.data()[0] - 1.2689).abs() < 1e-4);
    }

    #[test]
    fn empty_prefix_matches_plain_attention_and_keeps_length() {
        let mut rng = crate::rng::stream(3, "attn");
        let x = Tensor::<f64>::randn(&[5, 8], 1.0, &mut rng);
        let mut w = AttentionParams::identity(8);
        w.wq = Tensor::randn(&[8, 8], 0.5, &mut rng);
        w.wk = Tensor::randn(&[8, 8], 0.5, &mut rng);
        let empty = Tensor::zeros(&[0, 8]);
        let a = attention_with_prefix(&x, &empty, &empty, &w, 2).unwrap();
        let (plain, _) = attention_forward(x.data(), 5, 8, 2, None, w.weights());
        assert_eq!(a.data(), plain.as_slice());
        let pk = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let pv = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let b = attention_with_prefix(&x, &pk, &pv, &w, 2).unwrap();
        assert_eq!(b.shape(), &[5, 8]);
    }

    #[test]
    fn heads_must_divide_dim() {
        let x = Tensor::<f64>::zeros(&[1, 6]);
        let e = Tensor::zeros(&[0, 6]);
        let r = attention_with_prefix(&x, &e, &e, &AttentionParams::identity(6), 4);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn odd_prompt_length_rejected() {
        assert!(Prefix::<f64>::from_prompt(&[0.0; 6], 3, 2).is_err());
        let p = Prefix::<f64>::from_prompt(&[1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        assert_eq!(p.pk, vec![1.0, 2.0]);
        assert_eq!(p.pv, vec![3.0, 4.0]);
    }
}
