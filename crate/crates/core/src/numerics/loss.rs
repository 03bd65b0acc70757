use super::ops::{dot, log_sum_exp, norm, softmax_inplace};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Mean cross entropy over a batch of logit rows, with the gradient
/// `(softmax − onehot) / B` with respect to the logits.
pub fn cross_entropy_logits<F: Real>(
    logits: &Tensor<F>,
    target_ids: &[usize],
) -> Result<(F, Tensor<F>)> {
    let batch = logits.rows();
    let classes = logits.cols();
    if batch == 0 || batch != target_ids.len() {
        return Err(Error::Contract(format!(
            "cross entropy needs B ≥ 1 rows matching {} targets, got {batch}",
            target_ids.len()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let inv_b = F::one() / F::of(batch as f64);
    let mut loss = F::zero();
    let mut grad = logits.clone();
    for (b, &target) in target_ids.iter().enumerate() {
        if target >= classes {
            return Err(Error::Index {
                index: target,
                len: classes,
            });
        }
        let (l, row_grad) = cross_entropy_row(logits.row(b), target);
        loss = loss + l;
        let g = grad.row_mut(b);
        for (gi, ri) in g.iter_mut().zip(row_grad) {
            *gi = ri * inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

/// Single-row cross entropy: `(−log softmax(row)[target], softmax − onehot)`.
pub fn cross_entropy_row<F: Real>(row: &[F], target: usize) -> (F, Vec<F>) {
    let lse = log_sum_exp(row);
    let loss = lse - row[target];
    let mut grad = row.to_vec();
    softmax_inplace(&mut grad);
    grad[target] = grad[target] - F::one();
    (loss, grad)
}

/// Cosine similarity and its gradients with respect to both arguments.
#[derive(Debug, Clone)]
pub struct CosineGrad<F> {
    pub cos: F,
    pub du: Vec<F>,
    pub dv: Vec<F>,
}

pub fn cosine_similarity<F: Real>(u: &[F], v: &[F]) -> Result<F> {
    let nu = norm(u);
    let nv = norm(v);
    if nu == F::zero() || nv == F::zero() {
        return Err(Error::Domain("cosine of a zero-norm vector".into()));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// `1 − cos(u, v)`, in `[0, 2]`.
pub fn cosine_distance<F: Real>(u: &[F], v: &[F]) -> Result<F> {
    Ok(F::one() - cosine_similarity(u, v)?)
}

pub fn cosine_with_grad<F: Real>(u: &[F], v: &[F]) -> Result<CosineGrad<F>> {
    let nu = norm(u);
    let nv = norm(v);
    if nu == F::zero() || nv == F::zero() {
        return Err(Error::Domain("cosine of a zero-norm vector".into()));
    }
    let inv = F::one() / (nu * nv);
    let cos = dot(u, v) * inv;
    let cu = cos / (nu * nu);
    let cv = cos / (nv * nv);
    let du = u.iter().zip(v).map(|(&a, &b)| b * inv - cu * a).collect();
    let dv = u.iter().zip(v).map(|(&a, &b)| a * inv - cv * b).collect();
    Ok(CosineGrad { cos, du, dv })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[rows, cols], v).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let (loss, grad) = cross_entropy_logits(&t(1, 2, &[0.0, 0.0]), &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(grad.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn confident_logits_give_small_loss() {
        let (loss, _) = cross_entropy_logits(&t(1, 2, &[10.0, 0.0]), &[0]).unwrap();
        // −log σ(10) = ln(1 + e^−10)
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn gradient_is_averaged_over_batch() {
        let logits = t(2, 3, &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let (_, grad) = cross_entropy_logits(&logits, &[2, 1]).unwrap();
        let row_sum: f64 = grad.row(0).iter().sum();
        assert!(row_sum.abs() < 1e-15);
        assert!((grad.row(1)[0] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn errors_on_bad_target_and_nonfinite() {
        assert!(matches!(
            cross_entropy_logits(&t(1, 2, &[0.0, 0.0]), &[2]),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            cross_entropy_logits(&t(1, 2, &[f64::NAN, 0.0]), &[0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn cosine_distance_examples() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn cosine_grad_matches_finite_difference() {
        let u = [0.3f64, -1.0, 2.0];
        let v = [1.5f64, 0.2, -0.4];
        let g = cosine_with_grad(&u, &v).unwrap();
        let e = 1e-6;
        for i in 0..3 {
            let mut up = u;
            let mut um = u;
            up[i] += e;
            um[i] -= e;
            let num = (cosine_similarity(&up, &v).unwrap() - cosine_similarity(&um, &v).unwrap())
                / (2.0 * e);
            assert!((num - g.du[i]).abs() < 1e-9);
            let mut vp = v;
            let mut vm = v;
            vp[i] += e;
            vm[i] -= e;
            let num = (cosine_similarity(&u, &vp).unwrap() - cosine_similarity(&u, &vm).unwrap())
                / (2.0 * e);
            assert!((num - g.dv[i]).abs() < 1e-9);
        }
    }
}
