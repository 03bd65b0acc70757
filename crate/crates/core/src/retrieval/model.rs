use std::collections::BTreeMap;
use std::ops::Range;

use crate::encoder::{mean_rows, EncoderConfig, EncoderState, PrefixSet, SelectionMode, Trace};
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::prompts::{
    coda_compose, select_topn, CodaComposition, PromptPool, PromptStrategy, SelectionRecord,
    SelectionResult,
};
use crate::rng::Rng;

use super::classifier::{rank_scores, Classifier, RankedList};
use super::registry::DocidRegistry;

/// How a query picks its prompts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Routing {
    /// Key matching (or CODA composition).
    #[default]
    Select,
    /// Route to these entries regardless of keys.
    Force(Vec<usize>),
}

#[derive(Debug, Clone)]
pub enum Selection<F> {
    TopN(SelectionResult<F>),
    Coda(CodaComposition<F>),
}

impl<F: Real> Selection<F> {
    /// Ids and distances as logged: for CODA the `top_n` heaviest entries
    /// with distance `1 − α`.
    pub fn logged(&self, top_n: usize) -> (Vec<usize>, Vec<f64>) {
        match self {
            Selection::TopN(s) => (s.ids.clone(), s.distances.iter().map(|d| d.f64()).collect()),
            Selection::Coda(c) => {
                let mut order: Vec<usize> = (0..c.alpha.len()).collect();
                order
                    .sort_by(|&a, &b| c.alpha[b].partial_cmp(&c.alpha[a]).unwrap().then(a.cmp(&b)));
                order.truncate(top_n.min(order.len()));
                let d = order.iter().map(|&i| 1.0 - c.alpha[i].f64()).collect();
                (order, d)
            }
        }
    }
}

/// Selected prompt ids with their key distances.
pub type LoggedSelection = (Vec<usize>, Vec<f64>);

/// Forward result for one query.
#[derive(Debug, Clone)]
pub struct Encoded<F> {
    pub trace: Trace<F>,
    pub selection: Option<Selection<F>>,
}

impl<F: Real> Encoded<F> {
    pub fn h_q(&self) -> &[F] {
        self.trace.h_q()
    }
}

/// Encoder, classifier head, docid registry and optional prompt pool.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub encoder: EncoderState<F>,
    pub classifier: Classifier<F>,
    pub registry: DocidRegistry,
    pub pool: Option<PromptPool<F>>,
}

impl<F: Real> Model<F> {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let dim = config.dim;
        Ok(Model {
            encoder: EncoderState::new(config, rng)?,
            classifier: Classifier::new(dim),
            registry: DocidRegistry::new(),
            pool: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.config.dim
    }

    /// Registers a corpus and expands the head by one segment.
    pub fn index_corpus<S: AsRef<str>>(
        &mut self,
        doc_ids: &[S],
        rng: &mut Rng,
    ) -> Result<Range<usize>> {
        if doc_ids.is_empty() {
            return Err(Error::Contract(
                "classifier expansion needs n_new ≥ 1".into(),
            ));
        }
        let seg = self.registry.register(doc_ids)?;
        let rows = self.classifier.expand(doc_ids.len(), rng)?;
        debug_assert_eq!(seg, rows);
        Ok(rows)
    }

    fn route(
        &self,
        pool: &PromptPool<F>,
        emb: Vec<F>,
        routing: &Routing,
    ) -> Result<(Selection<F>, PrefixSet<F>)> {
        if pool.strategy == PromptStrategy::Coda {
            let comp = coda_compose(&emb, pool)?;
            let set = pool.prefix_from_composed(&comp.composed)?;
            return Ok((Selection::Coda(comp), set));
        }
        let sel = match routing {
            Routing::Select => select_topn(&emb, pool)?,
            Routing::Force(ids) => SelectionResult::forced(pool, ids.clone(), emb)?,
        };
        let set = pool.prefix_for(&sel.ids)?;
        Ok((Selection::TopN(sel), set))
    }

    /// Encodes a `[CLS]`-prefixed query, selecting prompts if a pool exists.
    ///
    /// Single-pass mode selects from the mean of the hidden states entering
    /// the first prompting layer, inside the same forward pass. Two-pass
    /// mode runs a prompt-free pass first and selects from its `[CLS]`.
    pub fn encode(&self, tokens: &[u32], routing: &Routing) -> Result<Encoded<F>> {
        let pool = match &self.pool {
            Some(p) if !p.is_empty() => p,
            _ => {
                return Ok(Encoded {
                    trace: self.encoder.forward(tokens, None)?,
                    selection: None,
                })
            }
        };
        match self.encoder.config.selection {
            SelectionMode::SinglePassAvg => {
                let first = pool.layers[0];
                let dim = self.dim();
                let mut routed: Option<(Selection<F>, PrefixSet<F>)> = None;
                let trace = self.encoder.trace(tokens, |l, input, n| {
                    if l == first {
                        routed = Some(self.route(pool, mean_rows(input, n, dim), routing)?);
                    }
                    Ok(routed.as_ref().and_then(|(_, s)| s.get(l)).cloned())
                })?;
                Ok(Encoded {
                    trace,
                    selection: routed.map(|r| r.0),
                })
            }
            SelectionMode::TwoPassCls => {
                let first = self.encoder.forward(tokens, None)?;
                let (sel, set) = self.route(pool, first.h_q().to_vec(), routing)?;
                Ok(Encoded {
                    trace: self.encoder.forward(tokens, Some(&set))?,
                    selection: Some(sel),
                })
            }
        }
    }

    /// Top-`k` docids for a query, plus the logged selection if prompts ran.
    pub fn retrieve(
        &self,
        tokens: &[u32],
        k: usize,
    ) -> Result<(RankedList<F>, Option<LoggedSelection>)> {
        let enc = self.encode(tokens, &Routing::Select)?;
        let ranked = rank_scores(&self.classifier.scores(enc.h_q()), k)?;
        let top_n = self.pool.as_ref().map_or(1, |p| p.top_n);
        Ok((ranked, enc.selection.map(|s| s.logged(top_n))))
    }

    /// Scores of every docid for a query.
    pub fn scores(&self, tokens: &[u32]) -> Result<Vec<F>> {
        let enc = self.encode(tokens, &Routing::Select)?;
        Ok(self.classifier.scores(enc.h_q()))
    }

    pub fn selection_record(
        &self,
        corpus: usize,
        query_id: &str,
        tokens: &[u32],
    ) -> Result<Option<SelectionRecord>> {
        let enc = self.encode(tokens, &Routing::Select)?;
        let top_n = self.pool.as_ref().map_or(1, |p| p.top_n);
        Ok(enc.selection.map(|s| {
            let (prompt_ids, distances) = s.logged(top_n);
            SelectionRecord {
                corpus,
                query_id: query_id.to_string(),
                prompt_ids,
                distances,
            }
        }))
    }

    /// SHA-256 over the encoder, the classifier head and every pool tensor.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.encoder.digest().as_bytes());
        h.update(self.classifier.weights().digest().as_bytes());
        if let Some(p) = &self.pool {
            for (name, t, _) in p.named() {
                h.update(name.as_bytes());
                h.update(t.digest().as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Digests of everything currently frozen: the encoder (when frozen),
    /// frozen classifier segments and frozen pool tensors.
    pub fn frozen_digests(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        if self.encoder.frozen {
            out.insert("encoder".to_string(), self.encoder.digest());
        }
        for (i, s) in self.classifier.segments().iter().enumerate() {
            if s.frozen {
                out.insert(
                    format!("classifier.segment{i}"),
                    self.classifier.segment_digest(i),
                );
            }
        }
        if let Some(p) = &self.pool {
            out.extend(p.frozen_digests());
        }
        out
    }
}
