use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::data::{CorpusTimeline, DocRecord, QueryKind, QueryRecord, Split};
use crate::error::{Error, Result};
use crate::numerics::{ops, Real};
use crate::retrieval::{Model, TrainExample};
use crate::rng::Rng;

/// Why a record was read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Training at timestep `t`.
    Train(usize),
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub phase: Phase,
    pub corpus: usize,
    /// `None` for the document list.
    pub split: Option<Split>,
}

/// Read-only view of a timeline that logs every access.
#[derive(Debug)]
pub struct DataStore {
    timeline: CorpusTimeline,
    log: Mutex<Vec<Access>>,
}

impl DataStore {
    pub fn new(timeline: CorpusTimeline) -> Result<Self> {
        timeline.validate()?;
        if timeline.is_empty() {
            return Err(Error::Data("timeline has no corpora".into()));
        }
        Ok(DataStore {
            timeline,
            log: Mutex::new(Vec::new()),
        })
    }

    pub fn num_corpora(&self) -> usize {
        self.timeline.len()
    }

    /// Untracked access for shape checks (vocabulary and length bounds).
    pub fn timeline(&self) -> &CorpusTimeline {
        &self.timeline
    }

    fn corpus(&self, corpus: usize) -> Result<&crate::data::Corpus> {
        self.timeline
            .corpora
            .get(corpus)
            .ok_or_else(|| Error::Data(format!("corpus {corpus} not in the timeline")))
    }

    fn record(&self, a: Access) {
        self.log.lock().expect("access log poisoned").push(a);
    }

    pub fn doc_ids(&self, phase: Phase, corpus: usize) -> Result<Vec<String>> {
        let c = self.corpus(corpus)?;
        self.record(Access {
            phase,
            corpus,
            split: None,
        });
        Ok(c.docs.iter().map(|d| d.doc_id.clone()).collect())
    }

    pub fn docs(&self, phase: Phase, corpus: usize) -> Result<Vec<DocRecord>> {
        let c = self.corpus(corpus)?;
        self.record(Access {
            phase,
            corpus,
            split: None,
        });
        Ok(c.docs.clone())
    }

    pub fn queries(&self, phase: Phase, corpus: usize, split: Split) -> Result<Vec<QueryRecord>> {
        let c = self.corpus(corpus)?;
        self.record(Access {
            phase,
            corpus,
            split: Some(split),
        });
        Ok(c.queries_in(split).cloned().collect())
    }

    pub fn accesses(&self) -> Vec<Access> {
        self.log.lock().expect("access log poisoned").clone()
    }

    pub fn clear_log(&self) {
        self.log.lock().expect("access log poisoned").clear()
    }
}

/// Training reads at step `t` that touched a corpus other than `D_t`.
pub fn rehearsal_violations(accesses: &[Access], t: usize) -> Vec<Access> {
    accesses
        .iter()
        .filter(|a| a.phase == Phase::Train(t) && a.corpus != t)
        .copied()
        .collect()
}

/// Converts query records into `[CLS]`-prefixed training examples.
pub fn to_examples<F: Real>(model: &Model<F>, queries: &[QueryRecord]) -> Result<Vec<TrainExample>> {
    queries
        .iter()
        .map(|q| {
            let gold = model.registry.docid(&q.doc_id)?;
            Ok(TrainExample {
                tokens: q.encoded(),
                gold,
            })
        })
        .collect()
}

/// Pseudo training queries of past corpora for sparse replay.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    examples: Vec<TrainExample>,
    per_corpus: Vec<usize>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps only pseudo-kind training queries.
    pub fn add_corpus<F: Real>(&mut self, model: &Model<F>, queries: &[QueryRecord]) -> Result<usize> {
        let kept: Vec<QueryRecord> = queries
            .iter()
            .filter(|q| q.split == Split::Train && q.kind == QueryKind::Pseudo)
            .cloned()
            .collect();
        let ex = to_examples(model, &kept)?;
        let n = ex.len();
        self.examples.extend(ex);
        self.per_corpus.push(n);
        Ok(n)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn per_corpus(&self) -> &[usize] {
        &self.per_corpus
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<TrainExample> {
        self.examples.choose_multiple(rng, n).cloned().collect()
    }
}

/// Matrix `Z` of per-docid mean query embeddings, one row per registered
/// docid, appended corpus by corpus.
#[derive(Debug, Default)]
pub struct CentroidCache<F> {
    dim: usize,
    rows: Vec<F>,
    reads: AtomicU64,
}

impl<F: Real> CentroidCache<F> {
    pub fn new(dim: usize) -> Self {
        CentroidCache {
            dim,
            rows: Vec::new(),
            reads: AtomicU64::new(0),
        }
    }

    pub fn columns(&self) -> usize {
        self.rows.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn append(&mut self, centroids: &[Vec<F>]) -> Result<()> {
        for c in centroids {
            if c.len() != self.dim {
                return Err(Error::Contract(format!(
                    "centroid of length {} in a {}-dim cache",
                    c.len(),
                    self.dim
                )));
            }
            self.rows.extend_from_slice(c);
        }
        Ok(())
    }

    pub fn column(&self, doc: usize) -> &[F] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.rows[doc * self.dim..(doc + 1) * self.dim]
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Bytes held at `bytes_per_float`.
    pub fn bytes(&self, bytes_per_float: u64) -> u64 {
        (self.rows.len() as u64) * bytes_per_float
    }
}

/// L2-normalized mean of the prompt-free `h_q` of each docid's training
/// queries, for the docids in `rows` (in docid order).
pub fn doc_centroids<F: Real>(
    model: &Model<F>,
    rows: std::ops::Range<usize>,
    queries: &[QueryRecord],
) -> Result<Vec<Vec<F>>> {
    let dim = model.dim();
    let mut sums = vec![vec![0.0f64; dim]; rows.len()];
    let mut counts = vec![0usize; rows.len()];
    for q in queries.iter().filter(|q| q.split == Split::Train) {
        let Ok(id) = model.registry.docid(&q.doc_id) else {
            continue;
        };
        if !rows.contains(&id) {
            continue;
        }
        let h = model.encoder.forward(&q.encoded(), None)?;
        let slot = id - rows.start;
        for (s, v) in sums[slot].iter_mut().zip(h.h_q()) {
            *s += v.f64();
        }
        counts[slot] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(i, (s, c))| {
            if c == 0 {
                return Err(Error::Data(format!(
                    "docid {} has no training queries for its centroid",
                    rows.start + i
                )));
            }
            let mean: Vec<F> = s.iter().map(|v| F::of(v / c as f64)).collect();
            let n = ops::norm(&mean);
            if n == F::zero() {
                return Err(Error::Domain(format!("zero centroid for docid {}", rows.start + i)));
            }
            Ok(mean.into_iter().map(|v| v / n).collect())
        })
        .collect()
}
