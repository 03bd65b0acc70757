//! Small pre-LN transformer encoder with prefix-prompt injection.
//!
//! The forward pass is driven layer by layer through a hook that sees the
//! input of every layer before it runs. Prompt selection uses that hook: in
//! single-pass mode the mean of layer `l−1` is read right before prompting
//! layer `l` and the prefix is chosen from it within the same pass.

mod block;
mod params;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use block::{attention_with_prefix, AttentionParams, Prefix, PrefixGrad};
pub(crate) use block::{block_backward, block_forward, BlockCache};
pub use params::{EncoderParams, LayerParams};

use crate::error::{Error, Result};
use crate::numerics::ops::{layer_norm, layer_norm_backward, NormCache};
use crate::numerics::Real;
use crate::rng::Rng;

/// Reserved `[CLS]` token id, always at position 0.
pub const CLS: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Prompt-free first pass, select on its final `[CLS]`, then a second
    /// pass with prompts.
    TwoPassCls,
    /// Select on the mean hidden state of the layer right below the first
    /// prompting layer, inside the single forward pass.
    SinglePassAvg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// 1-based, contiguous.
    pub prompt_layers: Vec<usize>,
    pub selection: SelectionMode,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 4,
            dim: 64,
            heads: 4,
            ff_dim: 128,
            max_len: 16,
            vocab_size: 1024,
            prompt_layers: vec![2],
            selection: SelectionMode::SinglePassAvg,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.dim == 0 || self.ff_dim == 0 || self.vocab_size == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if self.max_len < 2 {
            return bad("max_len must leave room for [CLS] and one token".into());
        }
        if self.prompt_layers.is_empty() {
            return bad("at least one prompting layer is required".into());
        }
        for w in self.prompt_layers.windows(2) {
            if w[1] != w[0] + 1 {
                return bad(format!(
                    "prompting layers {:?} must be contiguous and ascending",
                    self.prompt_layers
                ));
            }
        }
        let first = self.prompt_layers[0];
        let last = *self.prompt_layers.last().unwrap();
        if first < 1 || last > self.num_layers {
            return bad(format!(
                "prompting layers {:?} outside [1, {}]",
                self.prompt_layers, self.num_layers
            ));
        }
        Ok(())
    }

    pub fn first_prompt_layer(&self) -> usize {
        self.prompt_layers[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Counts block invocations across all forward passes.
#[derive(Debug, Default)]
pub struct LayerCounter(AtomicU64);

impl LayerCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

impl Clone for LayerCounter {
    fn clone(&self) -> Self {
        LayerCounter(AtomicU64::new(self.get()))
    }
}

/// Prefixes keyed by 1-based layer index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrefixSet<F> {
    layers: Vec<(usize, Prefix<F>)>,
}

impl<F: Real> PrefixSet<F> {
    pub fn new() -> Self {
        PrefixSet { layers: Vec::new() }
    }

    pub fn insert(&mut self, layer: usize, prefix: Prefix<F>) {
        self.layers.retain(|(l, _)| *l != layer);
        self.layers.push((layer, prefix));
    }

    pub fn get(&self, layer: usize) -> Option<&Prefix<F>> {
        self.layers
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, p)| p)
    }
}

/// Everything the forward pass keeps for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace<F> {
    n: usize,
    dim: usize,
    tokens: Vec<u32>,
    /// `hidden[0]` is the embedding output, `hidden[l]` the output of block `l`.
    hidden: Vec<Vec<F>>,
    blocks: Vec<BlockCache<F>>,
    lnf: NormCache<F>,
    out: Vec<F>,
}

impl<F: Real> Trace<F> {
    /// Final-layer `[CLS]` embedding `h_q`.
    pub fn h_q(&self) -> &[F] {
        &self.out[..self.dim]
    }

    /// Hidden state after block `l` (`l = 0` for the embedding layer).
    pub fn hidden(&self, l: usize) -> &[F] {
        &self.hidden[l]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Mean over positions of `hidden(l)`.
    pub fn mean_hidden(&self, l: usize) -> Vec<F> {
        mean_rows(&self.hidden[l], self.n, self.dim)
    }
}

pub(crate) fn mean_rows<F: Real>(x: &[F], n: usize, dim: usize) -> Vec<F> {
    let mut m = vec![F::zero(); dim];
    for row in x.chunks(dim).take(n) {
        for (a, &b) in m.iter_mut().zip(row) {
            *a = *a + b;
        }
    }
    let inv = F::one() / F::of(n as f64);
    m.iter_mut().for_each(|v| *v = *v * inv);
    m
}

/// Encoder weights plus the frozen flag and a layer-invocation counter.
#[derive(Debug, Clone)]
pub struct EncoderState<F> {
    pub config: EncoderConfig,
    pub params: EncoderParams<F>,
    pub frozen: bool,
    counter: LayerCounter,
}

impl<F: Real> EncoderState<F> {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(&config, rng);
        Ok(EncoderState {
            config,
            params,
            frozen: false,
            counter: LayerCounter::default(),
        })
    }

    pub fn from_params(config: EncoderConfig, params: EncoderParams<F>) -> Result<Self> {
        config.validate()?;
        Ok(EncoderState {
            config,
            params,
            frozen: false,
            counter: LayerCounter::default(),
        })
    }

    pub fn layer_invocations(&self) -> u64 {
        self.counter.get()
    }

    pub fn reset_counter(&self) {
        self.counter.reset()
    }

    /// SHA-256 over every weight tensor.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.params.named() {
            hasher.update(name.as_bytes());
            hasher.update(t.digest().as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.first() != Some(&CLS) {
            return Err(Error::Data("sequence must start with [CLS]".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Overlength {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Vocabulary {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Vec<F> {
        let d = self.config.dim;
        let mut x = vec![F::zero(); tokens.len() * d];
        for (i, &t) in tokens.iter().enumerate() {
            let te = self.params.tok_emb.row(t as usize);
            let pe = self.params.pos_emb.row(i);
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j];
            }
        }
        x
    }

    /// Runs the forward pass. Before block `l` (1-based) runs, `hook(l, input)`
    /// is called with that block's input (the output of layer `l−1`) and may
    /// return a prefix to inject at `l`.
    pub fn trace<H>(&self, tokens: &[u32], mut hook: H) -> Result<Trace<F>>
    where
        H: FnMut(usize, &[F], usize) -> Result<Option<Prefix<F>>>,
    {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let d = self.config.dim;
        let mut hidden = Vec::with_capacity(self.config.num_layers + 1);
        hidden.push(self.embed(tokens));
        let mut blocks = Vec::with_capacity(self.config.num_layers);
        for (idx, layer) in self.params.layers.iter().enumerate() {
            let prefix = hook(idx + 1, &hidden[idx], n)?;
            let (out, cache) = block_forward(
                layer,
                &hidden[idx],
                n,
                d,
                self.config.heads,
                prefix.as_ref(),
            );
            self.counter.bump();
            hidden.push(out);
            blocks.push(cache);
        }
        let (out, lnf) = layer_norm(
            hidden.last().unwrap(),
            self.params.lnf_g.data(),
            self.params.lnf_b.data(),
        );
        Ok(Trace {
            n,
            dim: d,
            tokens: tokens.to_vec(),
            hidden,
            blocks,
            lnf,
            out,
        })
    }

    /// Forward pass with a fixed prefix set (or none).
    pub fn forward(&self, tokens: &[u32], prefix: Option<&PrefixSet<F>>) -> Result<Trace<F>> {
        self.trace(tokens, |l, _, _| Ok(prefix.and_then(|p| p.get(l)).cloned()))
    }

    /// Mean of the hidden states of layer `l−1` (the embedding layer when
    /// `l = 1`). Runs only the blocks below `l`, so prompts never reach it.
    pub fn avg_at_layer(&self, tokens: &[u32], l: usize) -> Result<Vec<F>> {
        if l < 1 || l > self.config.num_layers {
            return Err(Error::Config(format!(
                "layer {l} outside [1, {}]",
                self.config.num_layers
            )));
        }
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let d = self.config.dim;
        let mut x = self.embed(tokens);
        for layer in &self.params.layers[..l - 1] {
            let (out, _) = block_forward(layer, &x, n, d, self.config.heads, None);
            self.counter.bump();
            x = out;
        }
        Ok(mean_rows(&x, n, d))
    }

    /// Backpropagates `dh` (gradient with respect to `h_q`).
    ///
    /// With `grads` set, every weight gradient is accumulated and the pass
    /// runs down to the embeddings. Without it, the pass stops after block
    /// `lowest_layer` (1-based) and only prefix gradients are produced.
    /// The returned vector is indexed by 0-based layer.
    pub fn backward(
        &self,
        trace: &Trace<F>,
        dh: &[F],
        mut grads: Option<&mut EncoderParams<F>>,
        lowest_layer: usize,
    ) -> Vec<Option<PrefixGrad<F>>> {
        let n = trace.n;
        let d = self.config.dim;
        let mut dout = vec![F::zero(); n * d];
        dout[..d].copy_from_slice(dh);
        let mut dx = match grads.as_deref_mut() {
            Some(g) => layer_norm_backward(
                &dout,
                &trace.lnf,
                self.params.lnf_g.data(),
                Some(g.lnf_g.data_mut()),
                Some(g.lnf_b.data_mut()),
            ),
            None => layer_norm_backward(&dout, &trace.lnf, self.params.lnf_g.data(), None, None),
        };
        let mut prefix_grads = vec![None; self.config.num_layers];
        let stop = if grads.is_some() {
            1
        } else {
            lowest_layer.max(1)
        };
        for l in (stop..=self.config.num_layers).rev() {
            let idx = l - 1;
            let layer_grads = grads.as_deref_mut().map(|g| &mut g.layers[idx]);
            let (dprev, pg) = block_backward(
                &self.params.layers[idx],
                &trace.blocks[idx],
                &dx,
                n,
                d,
                self.config.heads,
                layer_grads,
            );
            prefix_grads[idx] = pg;
            dx = dprev;
        }
        if let Some(g) = grads {
            for (i, &t) in trace.tokens.iter().enumerate() {
                let row = &dx[i * d..(i + 1) * d];
                let te = g.tok_emb.row_mut(t as usize);
                for j in 0..d {
                    te[j] = te[j] + row[j];
                }
                let pe = g.pos_emb.row_mut(i);
                for j in 0..d {
                    pe[j] = pe[j] + row[j];
                }
            }
        }
        prefix_grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn small() -> EncoderState<f64> {
        let cfg = EncoderConfig {
            num_layers: 3,
            dim: 8,
            heads: 2,
            ff_dim: 12,
            max_len: 8,
            vocab_size: 20,
            prompt_layers: vec![2],
            selection: SelectionMode::SinglePassAvg,
            init_std: 0.3,
        };
        EncoderState::new(cfg, &mut crate::rng::stream(1, "enc")).unwrap()
    }

    fn prefix(rows: usize, seed: u64) -> Prefix<f64> {
        let mut r = crate::rng::stream(seed, "prefix");
        let t = Tensor::<f64>::randn(&[2 * rows, 8], 1.0, &mut r);
        Prefix::from_prompt(t.data(), 2 * rows, 8).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        assert!(c.validate().is_ok());
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.prompt_layers = vec![1, 3];
        assert!(c.validate().is_err());
        c.prompt_layers = vec![4, 5];
        assert!(c.validate().is_err());
        c.prompt_layers = vec![2, 3, 4];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn forward_is_deterministic() {
        let enc = small();
        let a = enc.forward(&[0, 3, 5, 7], None).unwrap();
        let b = enc.forward(&[0, 3, 5, 7], None).unwrap();
        assert_eq!(a.h_q(), b.h_q());
    }

    #[test]
    fn empty_prefix_equals_no_prefix() {
        let enc = small();
        let mut set = PrefixSet::new();
        set.insert(2, Prefix::empty());
        let a = enc.forward(&[0, 4, 9], None).unwrap();
        let b = enc.forward(&[0, 4, 9], Some(&set)).unwrap();
        assert_eq!(a.h_q(), b.h_q());
    }

    #[test]
    fn prefix_changes_output_but_not_lower_layers() {
        let enc = small();
        let tokens = [0, 4, 9, 2];
        let mut s1 = PrefixSet::new();
        s1.insert(2, prefix(2, 1));
        let mut s2 = PrefixSet::new();
        s2.insert(2, prefix(2, 2));
        let a = enc.forward(&tokens, Some(&s1)).unwrap();
        let b = enc.forward(&tokens, Some(&s2)).unwrap();
        assert_ne!(a.h_q(), b.h_q());
        assert_eq!(a.hidden(0), b.hidden(0));
        assert_eq!(a.hidden(1), b.hidden(1));
        assert_ne!(a.hidden(2), b.hidden(2));
        assert_eq!(
            enc.avg_at_layer(&tokens, 2).unwrap(),
            a.mean_hidden(1),
            "avg_at_layer reads below the injection point"
        );
    }

    #[test]
    fn avg_at_first_layer_is_embedding_mean() {
        let enc = small();
        let e1: Vec<f64> = (0..8)
            .map(|j| enc.params.tok_emb.row(0)[j] + enc.params.pos_emb.row(0)[j])
            .collect();
        let e2: Vec<f64> = (0..8)
            .map(|j| enc.params.tok_emb.row(6)[j] + enc.params.pos_emb.row(1)[j])
            .collect();
        let avg = enc.avg_at_layer(&[0, 6], 1).unwrap();
        for j in 0..8 {
            assert!((avg[j] - (e1[j] + e2[j]) / 2.0).abs() < 1e-15);
        }
        let single = enc.avg_at_layer(&[0], 3).unwrap();
        let trace = enc.forward(&[0], None).unwrap();
        assert_eq!(single, trace.hidden(2).to_vec());
    }

    #[test]
    fn token_errors() {
        let enc = small();
        assert!(matches!(
            enc.forward(&[0, 25], None),
            Err(Error::Vocabulary { .. })
        ));
        assert!(matches!(
            enc.forward(&[0; 9], None),
            Err(Error::Overlength { .. })
        ));
        assert!(matches!(enc.forward(&[3, 1], None), Err(Error::Data(_))));
    }

    #[test]
    fn counter_counts_blocks() {
        let enc = small();
        enc.reset_counter();
        enc.forward(&[0, 1], None).unwrap();
        assert_eq!(enc.layer_invocations(), 3);
        enc.avg_at_layer(&[0, 1], 3).unwrap();
        assert_eq!(enc.layer_invocations(), 5);
    }
}
