use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{Prefix, PrefixGrad, PrefixSet};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStrategy {
    L2p,
    Spp,
    Coda,
    Topic,
}

impl PromptStrategy {
    /// Whether the objective adds the query–key matching loss.
    pub fn uses_match_loss(self) -> bool {
        matches!(self, PromptStrategy::L2p | PromptStrategy::Spp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Timestep(usize),
    Topic(usize),
}

/// One key–prompt pair. `prompt` has shape `[prompt_layers, m, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEntry<F> {
    pub prompt: Tensor<F>,
    pub key: Tensor<F>,
    /// CODA attention vector.
    pub attn: Option<Tensor<F>>,
    pub prompt_frozen: bool,
    pub key_frozen: bool,
    pub provenance: Provenance,
}

impl<F: Real> PromptEntry<F> {
    pub fn freeze(&mut self) {
        self.prompt_frozen = true;
        self.key_frozen = true;
    }

    /// Prompt rows of one prompting layer (`m × dim`).
    pub fn layer_prompt(&self, slot: usize) -> &[F] {
        let per = self.prompt.len() / self.prompt.shape()[0];
        &self.prompt.data()[slot * per..(slot + 1) * per]
    }
}

/// Prompt pool: prompts, keys, optional attention vectors and freeze flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool<F> {
    pub strategy: PromptStrategy,
    pub prompt_len: usize,
    pub dim: usize,
    pub top_n: usize,
    /// 1-based prompting layers, contiguous.
    pub layers: Vec<usize>,
    entries: Vec<PromptEntry<F>>,
    generation: u64,
}

impl<F: Real> PromptPool<F> {
    pub fn new(
        strategy: PromptStrategy,
        prompt_len: usize,
        dim: usize,
        top_n: usize,
        layers: Vec<usize>,
    ) -> Result<Self> {
        if !prompt_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "prompt length {prompt_len} must be even"
            )));
        }
        if top_n == 0 {
            return Err(Error::Config("top-N must be at least 1".into()));
        }
        if layers.is_empty() {
            return Err(Error::Config("prompt pool needs at least one layer".into()));
        }
        Ok(PromptPool {
            strategy,
            prompt_len,
            dim,
            top_n,
            layers,
            entries: Vec::new(),
            generation: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PromptEntry<F>] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &PromptEntry<F> {
        &self.entries[i]
    }

    /// Mutable access; invalidates earlier selections.
    pub fn entry_mut(&mut self, i: usize) -> &mut PromptEntry<F> {
        self.generation += 1;
        &mut self.entries[i]
    }

    pub fn entries_mut(&mut self) -> &mut [PromptEntry<F>] {
        self.generation += 1;
        &mut self.entries
    }

    pub fn push(&mut self, entry: PromptEntry<F>) -> Result<()> {
        let expected = [self.layers.len(), self.prompt_len, self.dim];
        if entry.prompt.shape() != expected || entry.key.shape() != [self.dim] {
            return Err(Error::Contract(format!(
                "entry shapes {:?}/{:?} do not match pool {:?}",
                entry.prompt.shape(),
                entry.key.shape(),
                expected
            )));
        }
        if self.strategy == PromptStrategy::Coda && entry.attn.is_none() {
            return Err(Error::Contract(
                "CODA entries need an attention vector".into(),
            ));
        }
        self.generation += 1;
        self.entries.push(entry);
        Ok(())
    }

    /// Monotone counter bumped by every mutation.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn num_frozen(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.prompt_frozen && e.key_frozen)
            .count()
    }

    /// Prefixes for the given selected entries, concatenated along the
    /// token axis in selection order, one per prompting layer.
    pub fn prefix_for(&self, ids: &[usize]) -> Result<PrefixSet<F>> {
        let mut set = PrefixSet::new();
        for (slot, &layer) in self.layers.iter().enumerate() {
            let mut prefix = Prefix::empty();
            for &id in ids {
                let p = Prefix::from_prompt(
                    self.entries[id].layer_prompt(slot),
                    self.prompt_len,
                    self.dim,
                )?;
                prefix.extend(&p);
            }
            set.insert(layer, prefix);
        }
        Ok(set)
    }

    /// `(name, tensor, frozen)` for every pool tensor.
    pub fn named(&self) -> Vec<(String, &Tensor<F>, bool)> {
        let mut out = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            out.push((format!("pool.{i}.prompt"), &e.prompt, e.prompt_frozen));
            out.push((format!("pool.{i}.key"), &e.key, e.key_frozen));
            if let Some(a) = &e.attn {
                out.push((format!("pool.{i}.attn"), a, e.prompt_frozen));
            }
        }
        out
    }

    /// Digests of every frozen tensor, keyed by name.
    pub fn frozen_digests(&self) -> BTreeMap<String, String> {
        self.named()
            .into_iter()
            .filter(|(_, _, frozen)| *frozen)
            .map(|(n, t, _)| (n, t.digest()))
            .collect()
    }

    /// Scalars that are trainable in at least one entry.
    pub fn trainable_scalars(&self) -> usize {
        self.named()
            .iter()
            .filter(|(_, _, f)| !*f)
            .map(|(_, t, _)| t.len())
            .sum()
    }

    /// Scalars of every tensor that is not permanently fixed (keys mined
    /// from topics are permanent; everything else was trained at the
    /// timestep that allocated it).
    pub fn allocated_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .map(|e| {
                let key = match e.provenance {
                    Provenance::Topic(_) => 0,
                    Provenance::Timestep(_) => e.key.len(),
                };
                e.prompt.len() + key + e.attn.as_ref().map_or(0, |a| a.len())
            })
            .sum()
    }
}

impl<F: Real> PromptPool<F> {
    /// Prefixes built from a composed `[prompt_layers, m, dim]` tensor.
    pub fn prefix_from_composed(&self, composed: &Tensor<F>) -> Result<PrefixSet<F>> {
        let per = self.prompt_len * self.dim;
        let mut set = PrefixSet::new();
        for (slot, &layer) in self.layers.iter().enumerate() {
            let rows = &composed.data()[slot * per..(slot + 1) * per];
            set.insert(layer, Prefix::from_prompt(rows, self.prompt_len, self.dim)?);
        }
        Ok(set)
    }

    /// Maps per-layer prefix gradients (indexed by 0-based encoder layer)
    /// back onto `count` concatenated prompts, each `[prompt_layers, m, dim]`.
    pub fn split_prefix_grads(
        &self,
        count: usize,
        grads: &[Option<PrefixGrad<F>>],
    ) -> Result<Vec<Vec<F>>> {
        let half = self.prompt_len / 2;
        let d = self.dim;
        let per_layer = self.prompt_len * d;
        let mut out = vec![vec![F::zero(); self.layers.len() * per_layer]; count];
        for (slot, &layer) in self.layers.iter().enumerate() {
            let g = grads
                .get(layer - 1)
                .and_then(|g| g.as_ref())
                .ok_or_else(|| Error::Contract(format!("no prefix gradient at layer {layer}")))?;
            if g.rows != count * half {
                return Err(Error::Contract(format!(
                    "prefix gradient has {} rows, expected {}",
                    g.rows,
                    count * half
                )));
            }
            for (j, buf) in out.iter_mut().enumerate() {
                let base = slot * per_layer;
                let src = j * half * d..(j + 1) * half * d;
                buf[base..base + half * d].copy_from_slice(&g.dpk[src.clone()]);
                buf[base + half * d..base + 2 * half * d].copy_from_slice(&g.dpv[src]);
            }
        }
        Ok(out)
    }
}
