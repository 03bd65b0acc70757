use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ops, Real, Tensor};
use crate::rng::Rng;

use super::pool::{PromptEntry, PromptPool, PromptStrategy, Provenance};

/// Pool hyperparameters shared by all strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    /// L2P pool size M.
    pub pool_size: usize,
    pub prompt_len: usize,
    pub top_n: usize,
    /// CODA prompts appended per timestep.
    pub prompts_per_task: usize,
    /// CODA prompt length (CODA uses shorter prompts than the other strategies).
    pub coda_prompt_len: usize,
    /// Topic-keyed pools: after each timestep, freeze the prompts that the
    /// timestep's queries were routed to.
    pub freeze_topic_prompts: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            pool_size: 5,
            prompt_len: 20,
            top_n: 1,
            prompts_per_task: 2,
            coda_prompt_len: 10,
            freeze_topic_prompts: false,
        }
    }
}

impl PoolConfig {
    pub fn prompt_len_for(&self, strategy: PromptStrategy) -> usize {
        match strategy {
            PromptStrategy::Coda => self.coda_prompt_len,
            _ => self.prompt_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.prompt_len.is_multiple_of(2) || !self.coda_prompt_len.is_multiple_of(2) {
            return Err(Error::Config("prompt lengths must be even".into()));
        }
        if self.pool_size == 0 || self.top_n == 0 || self.prompts_per_task == 0 {
            return Err(Error::Config(
                "pool size, top-N and prompts per task must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// What the trainer may update at this timestep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePlan {
    /// Entries whose prompt (and attention vector) is trainable.
    pub trainable_prompts: Vec<usize>,
    /// Entries whose key is trainable.
    pub trainable_keys: Vec<usize>,
    /// During training, route every query to these entries instead of
    /// selecting by key (the per-task pair of S-Prompt style pools).
    pub train_route: Option<Vec<usize>>,
}

impl FreezePlan {
    fn of<F: Real>(pool: &PromptPool<F>) -> Self {
        let e = pool.entries();
        FreezePlan {
            trainable_prompts: (0..e.len()).filter(|&i| !e[i].prompt_frozen).collect(),
            trainable_keys: (0..e.len()).filter(|&i| !e[i].key_frozen).collect(),
            train_route: None,
        }
    }
}

fn unit_random<F: Real>(dim: usize, rng: &mut Rng) -> Tensor<F> {
    let mut t = Tensor::<F>::randn(&[dim], 1.0, rng);
    let n = t.norm();
    t.scale(F::one() / n);
    t
}

fn fresh_prompt<F: Real>(layers: usize, m: usize, dim: usize, rng: &mut Rng) -> Tensor<F> {
    Tensor::uniform(&[layers, m, dim], 1.0 / (dim as f64).sqrt(), rng)
}

/// Gram–Schmidt: removes from a random unit vector its projection onto
/// each of `basis`, then renormalizes. When the basis already spans the
/// space the raw random direction is kept.
fn orthogonal_to<F: Real>(basis: &[&Tensor<F>], dim: usize, rng: &mut Rng) -> Tensor<F> {
    let raw = unit_random::<F>(dim, rng);
    let mut v = raw.data().to_vec();
    for b in basis {
        let bn = ops::norm(b.data());
        if bn == F::zero() {
            continue;
        }
        let coef = ops::dot(&v, b.data()) / (bn * bn);
        ops::axpy(-coef, b.data(), &mut v);
    }
    let n = ops::norm(&v);
    if n.f64() < 1e-6 {
        return raw;
    }
    v.iter_mut().for_each(|x| *x = *x / n);
    Tensor::from_vec(&[dim], v).expect("dim-sized vector")
}

/// Grows or creates the pool for timestep `t ≥ 1` and reports which
/// tensors are trainable.
#[allow(clippy::too_many_arguments)]
pub fn allocate_for_timestep<F: Real>(
    pool: Option<PromptPool<F>>,
    strategy: PromptStrategy,
    cfg: &PoolConfig,
    layers: &[usize],
    dim: usize,
    t: usize,
    topic_keys: Option<&Tensor<F>>,
    rng: &mut Rng,
) -> Result<(PromptPool<F>, FreezePlan)> {
    if t == 0 {
        return Err(Error::Contract("prompt allocation starts at t = 1".into()));
    }
    cfg.validate()?;
    let m = cfg.prompt_len_for(strategy);
    let nl = layers.len();
    let mut pool = match pool {
        Some(p) => {
            if p.strategy != strategy {
                return Err(Error::Contract(format!(
                    "pool built for {:?} reused for {:?}",
                    p.strategy, strategy
                )));
            }
            p
        }
        None => PromptPool::new(strategy, m, dim, cfg.top_n, layers.to_vec())?,
    };
    match strategy {
        PromptStrategy::L2p => {
            if pool.is_empty() {
                for _ in 0..cfg.pool_size {
                    pool.push(PromptEntry {
                        prompt: fresh_prompt(nl, m, dim, rng),
                        key: unit_random(dim, rng),
                        attn: None,
                        prompt_frozen: false,
                        key_frozen: false,
                        provenance: Provenance::Timestep(t),
                    })?;
                }
            }
            {
                let plan = FreezePlan::of(&pool);
                Ok((pool, plan))
            }
        }
        PromptStrategy::Spp => {
            pool.entries_mut().iter_mut().for_each(|e| e.freeze());
            pool.push(PromptEntry {
                prompt: fresh_prompt(nl, m, dim, rng),
                key: unit_random(dim, rng),
                attn: None,
                prompt_frozen: false,
                key_frozen: false,
                provenance: Provenance::Timestep(t),
            })?;
            let mut plan = FreezePlan::of(&pool);
            plan.train_route = Some(vec![pool.len() - 1]);
            Ok((pool, plan))
        }
        PromptStrategy::Coda => {
            pool.entries_mut().iter_mut().for_each(|e| e.freeze());
            for _ in 0..cfg.prompts_per_task {
                let key = {
                    let keys: Vec<&Tensor<F>> = pool.entries().iter().map(|e| &e.key).collect();
                    orthogonal_to(&keys, dim, rng)
                };
                let attn = {
                    let attns: Vec<&Tensor<F>> = pool
                        .entries()
                        .iter()
                        .filter_map(|e| e.attn.as_ref())
                        .collect();
                    orthogonal_to(&attns, dim, rng)
                };
                pool.push(PromptEntry {
                    prompt: fresh_prompt(nl, m, dim, rng),
                    key,
                    attn: Some(attn),
                    prompt_frozen: false,
                    key_frozen: false,
                    provenance: Provenance::Timestep(t),
                })?;
            }
            {
                let plan = FreezePlan::of(&pool);
                Ok((pool, plan))
            }
        }
        PromptStrategy::Topic => {
            if pool.is_empty() {
                let keys = topic_keys.ok_or_else(|| {
                    Error::Config("topic-keyed prompts need a mined topic model".into())
                })?;
                if keys.shape().len() != 2 || keys.cols() != dim || keys.rows() == 0 {
                    return Err(Error::Config(format!(
                        "topic keys have shape {:?}, expected G×{dim}",
                        keys.shape()
                    )));
                }
                for g in 0..keys.rows() {
                    let key = Tensor::from_vec(&[dim], keys.row(g).to_vec())?;
                    pool.push(PromptEntry {
                        prompt: fresh_prompt(nl, m, dim, rng),
                        key,
                        attn: None,
                        prompt_frozen: false,
                        key_frozen: true,
                        provenance: Provenance::Topic(g),
                    })?;
                }
            }
            {
                let plan = FreezePlan::of(&pool);
                Ok((pool, plan))
            }
        }
    }
}
