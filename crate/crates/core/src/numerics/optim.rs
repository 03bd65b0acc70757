//! AdamW with decoupled weight decay:
//!
//! ```text
//! m ← β1·m + (1−β1)·g
//! v ← β2·v + (1−β2)·g²
//! p ← p − lr·(m̂ / (√v̂ + ε) + wd·p),   m̂ = m/(1−β1^t), v̂ = v/(1−β2^t)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
}

/// Per-parameter moment accumulators keyed by parameter name.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<F>>,
    /// Learning-rate overrides for parameters whose name starts with the
    /// given prefix; the longest matching prefix wins.
    group_lr: Vec<(String, f64)>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            moments: BTreeMap::new(),
            group_lr: Vec::new(),
        }
    }

    /// Uses `lr` for every parameter named `prefix…`.
    pub fn set_group_lr(&mut self, prefix: &str, lr: f64) {
        self.group_lr.retain(|(p, _)| p != prefix);
        self.group_lr.push((prefix.to_string(), lr));
    }

    /// Learning rate applied to parameter `name`.
    pub fn lr_for(&self, name: &str) -> f64 {
        self.group_lr
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(self.config.lr, |&(_, lr)| lr)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once per optimizer step before
    /// the per-parameter updates.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Applies the update to one named parameter.
    pub fn update(&mut self, name: &str, param: &mut [F], grad: &[F]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Contract(format!(
                "parameter `{name}` has {} entries but gradient has {}",
                param.len(),
                grad.len()
            )));
        }
        if self.step == 0 {
            return Err(Error::Contract("update before begin_step".into()));
        }
        let lr = F::of(self.lr_for(name));
        let moments = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: vec![F::zero(); param.len()],
                v: vec![F::zero(); param.len()],
            });
        if moments.m.len() != param.len() {
            return Err(Error::Contract(format!(
                "parameter `{name}` changed size from {} to {}",
                moments.m.len(),
                param.len()
            )));
        }
        let c = &self.config;
        let t = self.step as i32;
        let b1 = F::of(c.beta1);
        let b2 = F::of(c.beta2);
        let one = F::one();
        let bc1 = F::of(1.0 - c.beta1.powi(t));
        let bc2 = F::of(1.0 - c.beta2.powi(t));
        let eps = F::of(c.eps);
        let wd = F::of(c.weight_decay);
        for i in 0..param.len() {
            let g = grad[i];
            let m = b1 * moments.m[i] + (one - b1) * g;
            let v = b2 * moments.v[i] + (one - b2) * g * g;
            moments.m[i] = m;
            moments.v[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let denom = v_hat.sqrt() + eps;
            let adaptive = if m_hat == F::zero() {
                F::zero()
            } else {
                m_hat / denom
            };
            param[i] = param[i] - lr * (adaptive + wd * param[i]);
        }
        Ok(())
    }
}

/// One optimizer step over positionally named parameters.
pub fn adamw_step<F: Real>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut OptimizerState<F>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "shape mismatch {:?} vs {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.begin_step();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(&i.to_string(), p.data_mut(), g.data())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[x]).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut params = vec![Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()];
        let grads = vec![Tensor::<f64>::zeros(&[3])];
        let mut state = OptimizerState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let before = params[0].clone();
        adamw_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params[0], before);
    }

    #[test]
    fn sign_step_with_zero_betas() {
        let mut params = vec![scalar(1.0)];
        let grads = vec![scalar(1.0)];
        let mut state = OptimizerState::new(AdamWConfig {
            lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            weight_decay: 0.0,
        });
        adamw_step(&mut params, &grads, &mut state).unwrap();
        assert!((params[0].data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_exactly() {
        let mut params = vec![scalar(2.0)];
        let grads = vec![scalar(0.0)];
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.05,
            ..Default::default()
        };
        let mut state = OptimizerState::new(cfg);
        adamw_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params[0].data()[0], 2.0 - 0.1 * 0.05 * 2.0);
    }

    #[test]
    fn zero_lr_is_identity_and_steps_increase() {
        let mut params = vec![Tensor::<f64>::from_f64(&[2], &[0.7, -0.1]).unwrap()];
        let grads = vec![Tensor::from_f64(&[2], &[3.0, 1.0]).unwrap()];
        let mut state = OptimizerState::new(AdamWConfig::with_lr(0.0));
        let before = params[0].clone();
        for expected in 1..=3 {
            adamw_step(&mut params, &grads, &mut state).unwrap();
            assert_eq!(state.step(), expected);
        }
        assert_eq!(params[0], before);
    }

    #[test]
    fn group_rates_override_by_longest_prefix() {
        let mut state = OptimizerState::<f64>::new(AdamWConfig {
            lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            weight_decay: 0.0,
        });
        state.set_group_lr("pool.", 0.01);
        state.set_group_lr("pool.3.", 0.5);
        assert_eq!(state.lr_for("classifier.rows0-4"), 0.1);
        assert_eq!(state.lr_for("pool.1.prompt"), 0.01);
        assert_eq!(state.lr_for("pool.3.key"), 0.5);
        state.begin_step();
        let mut p = [1.0];
        state.update("pool.1.prompt", &mut p, &[2.0]).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::<f64>::zeros(&[2])];
        let grads = vec![Tensor::<f64>::zeros(&[3])];
        let mut state = OptimizerState::new(AdamWConfig::default());
        assert!(matches!(
            adamw_step(&mut params, &grads, &mut state),
            Err(Error::Contract(_))
        ));
    }
}
