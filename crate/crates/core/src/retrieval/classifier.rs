use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{ops, Real, Tensor};
use crate::rng::Rng;

/// Initialization scale for new docid rows.
pub const NEW_ROW_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub rows: Range<usize>,
    pub frozen: bool,
}

/// The linear head, stored one row per docid (`docs × dim`), so the score
/// of docid `j` is `row(j) · h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<F> {
    weights: Tensor<F>,
    segments: Vec<Segment>,
}

impl<F: Real> Classifier<F> {
    pub fn new(dim: usize) -> Self {
        Classifier {
            weights: Tensor::zeros(&[0, dim]),
            segments: Vec::new(),
        }
    }

    pub fn from_parts(weights: Tensor<F>, segments: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.rows.start != next || s.rows.end < s.rows.start {
                return Err(Error::Contract(
                    "classifier segments must tile the rows".into(),
                ));
            }
            next = s.rows.end;
        }
        if weights.shape().len() != 2 || next != weights.rows() {
            return Err(Error::Contract(format!(
                "segments cover {next} rows, weights have shape {:?}",
                weights.shape()
            )));
        }
        Ok(Classifier { weights, segments })
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn num_docs(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Tensor<F> {
        &self.weights
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Appends `n_new` rows drawn from N(0, 0.02²) as a new trainable segment.
    pub fn expand(&mut self, n_new: usize, rng: &mut Rng) -> Result<Range<usize>> {
        if n_new == 0 {
            return Err(Error::Contract(
                "classifier expansion needs n_new ≥ 1".into(),
            ));
        }
        let start = self.num_docs();
        let fresh = Tensor::randn(&[n_new, self.dim()], NEW_ROW_STD, rng);
        self.weights.append_rows(&fresh)?;
        let rows = start..start + n_new;
        self.segments.push(Segment {
            rows: rows.clone(),
            frozen: false,
        });
        Ok(rows)
    }

    pub fn freeze_all(&mut self) {
        self.segments.iter_mut().for_each(|s| s.frozen = true);
    }

    pub fn unfreeze_all(&mut self) {
        self.segments.iter_mut().for_each(|s| s.frozen = false);
    }

    pub fn set_frozen(&mut self, segment: usize, frozen: bool) {
        self.segments[segment].frozen = frozen;
    }

    pub fn is_row_frozen(&self, row: usize) -> bool {
        self.segments
            .iter()
            .find(|s| s.rows.contains(&row))
            .is_some_and(|s| s.frozen)
    }

    /// Contiguous range covering every unfrozen row, if unfrozen rows are
    /// contiguous.
    pub fn trainable_rows(&self) -> Result<Range<usize>> {
        let live: Vec<&Segment> = self.segments.iter().filter(|s| !s.frozen).collect();
        match (live.first(), live.last()) {
            (None, _) | (_, None) => Ok(0..0),
            (Some(a), Some(b)) => {
                let r = a.rows.start..b.rows.end;
                if r.clone().any(|row| self.is_row_frozen(row)) {
                    return Err(Error::Contract(
                        "unfrozen segments are not contiguous".into(),
                    ));
                }
                Ok(r)
            }
        }
    }

    pub fn rows_mut(&mut self, rows: Range<usize>) -> &mut [F] {
        let d = self.dim();
        &mut self.weights.data_mut()[rows.start * d..rows.end * d]
    }

    /// Scores of every docid for `h`.
    pub fn scores(&self, h: &[F]) -> Vec<F> {
        let mut out = vec![F::zero(); self.num_docs()];
        ops::matmul_nt(
            h,
            self.weights.data(),
            1,
            self.dim(),
            self.num_docs(),
            &mut out,
        );
        out
    }

    pub fn segment_digest(&self, segment: usize) -> String {
        let rows = self.segments[segment].rows.clone();
        let d = self.dim();
        let t = Tensor::from_vec(
            &[rows.len(), d],
            self.weights.data()[rows.start * d..rows.end * d].to_vec(),
        )
        .expect("segment slice");
        t.digest()
    }
}

/// Descending-score `(docid, score)` list.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList<F> {
    pub entries: Vec<(usize, F)>,
}

impl<F> RankedList<F> {
    pub fn docids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Exact top-`k` of `scores`, ties broken by ascending docid.
pub fn rank_scores<F: Real>(scores: &[F], k: usize) -> Result<RankedList<F>> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if k > scores.len() {
        return Err(Error::Contract(format!(
            "k = {k} exceeds the {} indexed docids",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite retrieval score".into()));
    }
    let order = |a: &(usize, F), b: &(usize, F)| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0));
    let mut all: Vec<(usize, F)> = scores.iter().copied().enumerate().collect();
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, order);
        all.truncate(k);
    }
    all.sort_by(order);
    Ok(RankedList { entries: all })
}

pub fn score_and_rank<F: Real>(h: &[F], cls: &Classifier<F>, k: usize) -> Result<RankedList<F>> {
    rank_scores(&cls.scores(h), k)
}
