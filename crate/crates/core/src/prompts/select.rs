use crate::error::{Error, Result};
use crate::numerics::{cosine_distance, cosine_with_grad, CosineGrad, Real, Tensor};

use super::pool::{PromptPool, PromptStrategy};

/// Outcome of matching one selection embedding against the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult<F> {
    /// Selected ids, ascending by distance then id. For CODA this is the
    /// top-N by weight and is informational only.
    pub ids: Vec<usize>,
    /// Cosine distances of the selected ids, aligned with `ids`.
    pub distances: Vec<F>,
    /// CODA weights over every entry; empty for the other strategies.
    pub weights: Vec<F>,
    pub match_loss: F,
    pub embedding: Vec<F>,
    generation: u64,
}

impl<F: Real> SelectionResult<F> {
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// A result that routes to fixed entries without consulting the keys.
    pub fn forced(pool: &PromptPool<F>, ids: Vec<usize>, embedding: Vec<F>) -> Result<Self> {
        let mut distances = Vec::with_capacity(ids.len());
        let mut loss = F::zero();
        for &i in &ids {
            if i >= pool.len() {
                return Err(Error::Index {
                    index: i,
                    len: pool.len(),
                });
            }
            let d = cosine_distance(&embedding, pool.entry(i).key.data())?;
            loss = loss + d;
            distances.push(d);
        }
        Ok(SelectionResult {
            ids,
            distances,
            weights: Vec::new(),
            match_loss: loss,
            embedding,
            generation: pool.generation(),
        })
    }
}

/// Top-N keys by cosine distance to `h`, ties broken by ascending id.
///
/// Because the matching objective is a sum of per-key distances, the
/// minimizing N-subset is exactly the N individually closest keys.
pub fn select_topn<F: Real>(h: &[F], pool: &PromptPool<F>) -> Result<SelectionResult<F>> {
    if pool.is_empty() {
        return Err(Error::Contract(
            "selection from an empty prompt pool".into(),
        ));
    }
    if h.len() != pool.dim {
        return Err(Error::Contract(format!(
            "selection embedding has {} entries, pool dim is {}",
            h.len(),
            pool.dim
        )));
    }
    let mut scored = Vec::with_capacity(pool.len());
    for (i, e) in pool.entries().iter().enumerate() {
        scored.push((cosine_distance(h, e.key.data())?, i));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(pool.top_n.min(pool.len()));
    let match_loss = scored.iter().map(|s| s.0).fold(F::zero(), |a, b| a + b);
    Ok(SelectionResult {
        ids: scored.iter().map(|s| s.1).collect(),
        distances: scored.iter().map(|s| s.0).collect(),
        weights: Vec::new(),
        match_loss,
        embedding: h.to_vec(),
        generation: pool.generation(),
    })
}

/// Gradients of the matching loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchGrad<F> {
    /// `(entry id, dL/dk)` for every selected, trainable key.
    pub keys: Vec<(usize, Vec<F>)>,
    pub dh: Vec<F>,
}

/// Differentiates `Σ_{i∈S} (1 − cos(h, k_i))` with the selection held fixed.
/// Frozen keys and every key of a topic-keyed pool get no gradient.
pub fn match_loss_grad<F: Real>(
    h: &[F],
    pool: &PromptPool<F>,
    sel: &SelectionResult<F>,
) -> Result<MatchGrad<F>> {
    if sel.generation != pool.generation() {
        return Err(Error::Contract(format!(
            "selection made at pool generation {} used at generation {}",
            sel.generation,
            pool.generation()
        )));
    }
    let mut dh = vec![F::zero(); h.len()];
    let mut keys = Vec::new();
    for &i in &sel.ids {
        let e = pool.entry(i);
        let g = cosine_with_grad(h, e.key.data())?;
        for (a, b) in dh.iter_mut().zip(&g.du) {
            *a = *a - *b;
        }
        if !e.key_frozen && pool.strategy != PromptStrategy::Topic {
            keys.push((i, g.dv.iter().map(|&v| -v).collect()));
        }
    }
    Ok(MatchGrad { keys, dh })
}

/// Weighted prompt `Σ α_i p_i` with `α_i = cos(h ⊙ A_i, k_i)`.
#[derive(Debug, Clone)]
pub struct CodaComposition<F> {
    pub alpha: Vec<F>,
    /// Shape `[prompt_layers, m, dim]`.
    pub composed: Tensor<F>,
    /// The selection embedding the weights were computed from.
    pub embedding: Vec<F>,
    cos: Vec<CosineGrad<F>>,
    generation: u64,
}

impl<F: Real> CodaComposition<F> {
    pub fn generation(&self) -> u64 {
        self.generation
    }
}

pub fn coda_compose<F: Real>(h: &[F], pool: &PromptPool<F>) -> Result<CodaComposition<F>> {
    if pool.strategy != PromptStrategy::Coda {
        return Err(Error::Contract("coda_compose on a non-CODA pool".into()));
    }
    if pool.is_empty() {
        return Err(Error::Contract(
            "composition over an empty prompt pool".into(),
        ));
    }
    let shape = pool.entry(0).prompt.shape().to_vec();
    let mut composed = Tensor::zeros(&shape);
    let mut alpha = Vec::with_capacity(pool.len());
    let mut cos = Vec::with_capacity(pool.len());
    for e in pool.entries() {
        let a = e
            .attn
            .as_ref()
            .expect("CODA entries carry attention vectors");
        let u: Vec<F> = h.iter().zip(a.data()).map(|(&x, &y)| x * y).collect();
        let g = cosine_with_grad(&u, e.key.data())?;
        for (c, &p) in composed.data_mut().iter_mut().zip(e.prompt.data()) {
            *c = *c + g.cos * p;
        }
        alpha.push(g.cos);
        cos.push(g);
    }
    Ok(CodaComposition {
        alpha,
        composed,
        embedding: h.to_vec(),
        cos,
        generation: pool.generation(),
    })
}

/// Gradients for one CODA entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CodaEntryGrad<F> {
    pub id: usize,
    pub prompt: Vec<F>,
    pub key: Vec<F>,
    pub attn: Vec<F>,
}

/// Backpropagates `d(composed)` into every unfrozen entry.
pub fn coda_backward<F: Real>(
    h: &[F],
    pool: &PromptPool<F>,
    comp: &CodaComposition<F>,
    dcomposed: &[F],
) -> Result<Vec<CodaEntryGrad<F>>> {
    if comp.generation != pool.generation() {
        return Err(Error::Contract("stale CODA composition".into()));
    }
    let mut out = Vec::new();
    for (i, e) in pool.entries().iter().enumerate() {
        if e.prompt_frozen && e.key_frozen {
            continue;
        }
        let alpha = comp.alpha[i];
        let dalpha = dcomposed
            .iter()
            .zip(e.prompt.data())
            .fold(F::zero(), |acc, (&d, &p)| acc + d * p);
        let g = &comp.cos[i];
        let prompt = if e.prompt_frozen {
            Vec::new()
        } else {
            dcomposed.iter().map(|&d| alpha * d).collect()
        };
        let key = if e.key_frozen {
            Vec::new()
        } else {
            g.dv.iter().map(|&v| dalpha * v).collect()
        };
        let attn = if e.prompt_frozen {
            Vec::new()
        } else {
            g.du.iter()
                .zip(h)
                .map(|(&du, &x)| dalpha * du * x)
                .collect()
        };
        out.push(CodaEntryGrad {
            id: i,
            prompt,
            key,
            attn,
        });
    }
    Ok(out)
}
