use super::EncoderConfig;
use crate::numerics::{Real, Tensor};
use crate::rng::Rng;

/// Weights of one pre-LN transformer block. Projection matrices are stored
/// `d_in × d_out` so that `y = x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    /// No key bias: it would add the same constant to every attention
    /// logit of a query, which the softmax cancels.
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

const LAYER_FIELDS: [&str; 15] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2",
    "b2",
];

impl<F: Real> LayerParams<F> {
    fn init(dim: usize, ff: usize, std: f64, rng: &mut Rng) -> Self {
        LayerParams {
            ln1_g: Tensor::filled(&[dim], F::one()),
            ln1_b: Tensor::zeros(&[dim]),
            wq: Tensor::randn(&[dim, dim], std, rng),
            bq: Tensor::zeros(&[dim]),
            wk: Tensor::randn(&[dim, dim], std, rng),
            wv: Tensor::randn(&[dim, dim], std, rng),
            bv: Tensor::zeros(&[dim]),
            wo: Tensor::randn(&[dim, dim], std, rng),
            bo: Tensor::zeros(&[dim]),
            ln2_g: Tensor::filled(&[dim], F::one()),
            ln2_b: Tensor::zeros(&[dim]),
            w1: Tensor::randn(&[dim, ff], std, rng),
            b1: Tensor::zeros(&[ff]),
            w2: Tensor::randn(&[ff, dim], std, rng),
            b2: Tensor::zeros(&[dim]),
        }
    }

    fn tensors(&self) -> [&Tensor<F>; 15] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<F>; 15] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// All encoder weights: token and position embeddings, blocks, final norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub tok_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_g: Tensor<F>,
    pub lnf_b: Tensor<F>,
}

impl<F: Real> EncoderParams<F> {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let std = cfg.init_std;
        EncoderParams {
            tok_emb: Tensor::randn(&[cfg.vocab_size, cfg.dim], std, rng),
            pos_emb: Tensor::randn(&[cfg.max_len, cfg.dim], std, rng),
            layers: (0..cfg.num_layers)
                .map(|_| LayerParams::init(cfg.dim, cfg.ff_dim, std, rng))
                .collect(),
            lnf_g: Tensor::filled(&[cfg.dim], F::one()),
            lnf_b: Tensor::zeros(&[cfg.dim]),
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        let mut z = other.clone();
        for (_, t) in z.named_mut() {
            t.data_mut().fill(F::zero());
        }
        z
    }

    /// Stable `(name, tensor)` listing used by the optimizer, checkpoints and
    /// digests.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("encoder.tok_emb".to_string(), &self.tok_emb),
            ("encoder.pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.tensors()) {
                out.push((format!("encoder.layer{}.{field}", l + 1), t));
            }
        }
        out.push(("encoder.lnf_g".to_string(), &self.lnf_g));
        out.push(("encoder.lnf_b".to_string(), &self.lnf_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = vec![
            ("encoder.tok_emb".to_string(), &mut self.tok_emb),
            ("encoder.pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.tensors_mut()) {
                out.push((format!("encoder.layer{}.{field}", l + 1), t));
            }
        }
        out.push(("encoder.lnf_g".to_string(), &mut self.lnf_g));
        out.push(("encoder.lnf_b".to_string(), &mut self.lnf_b));
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: F) {
        for (_, t) in self.named_mut() {
            t.scale(s);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}
