//! Topic mining over document embeddings: k-means++ clustering followed by
//! class-based TF-IDF labelling. Centroids become fixed prompt keys.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::rng;

pub const MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    /// Unit-norm centroid.
    pub centroid: Vec<f64>,
    /// `(term id, c-TF-IDF score)`, best first.
    pub top_terms: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub topics: Vec<Topic>,
    /// Topic of each clustered document, in input order.
    pub assignments: Vec<usize>,
    /// k-means objective after each assignment step.
    #[serde(default)]
    pub objective_trace: Vec<f64>,
}

impl TopicModel {
    pub fn num_topics(&self) -> usize {
        self.topics.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: TopicModel = serde_json::from_str(&text)?;
        if model.topics.is_empty() {
            return Err(Error::Data(format!("{} has no topics", path.display())));
        }
        Ok(model)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], g: usize, r: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[r.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < g {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            // every remaining point coincides with a centroid
            (0..n).find(|&i| d2[i] == 0.0).unwrap_or(0)
        } else {
            let mut target = r.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centroids.push(points[idx].clone());
        let c = centroids.last().unwrap();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, c));
        }
    }
    centroids
}

/// Clusters `embeddings` into `g` topics. Centroids are L2-normalized after
/// convergence; terms are left empty (see [`ctfidf_terms`]).
pub fn mine_topics<F: Real>(embeddings: &[Vec<F>], g: usize, seed: u64) -> Result<TopicModel> {
    if g == 0 {
        return Err(Error::Config("topic count must be at least 1".into()));
    }
    if g > embeddings.len() {
        return Err(Error::Config(format!(
            "{g} topics requested from {} documents",
            embeddings.len()
        )));
    }
    let points: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.iter().map(|v| v.f64()).collect())
        .collect();
    let dim = points[0].len();
    let mut r = rng::stream(seed, "kmeans");
    let mut centroids = kmeans_pp(&points, g, &mut r);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        let mut objective = 0.0;
        for (a, p) in assignments.iter_mut().zip(&points) {
            let (c, d) = nearest(p, &centroids);
            objective += d;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        trace.push(objective);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; g];
        let mut counts = vec![0usize; g];
        for (&a, p) in assignments.iter().zip(&points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..g {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..g {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        let di = sq_dist(&points[i], &centroids[assignments[i]]);
                        let dj = sq_dist(&points[j], &centroids[assignments[j]]);
                        di.partial_cmp(&dj).unwrap().then(j.cmp(&i))
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
            }
        }
    }
    let topics = centroids
        .into_iter()
        .map(|c| {
            let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Domain("zero-norm topic centroid".into()));
            }
            Ok(Topic {
                centroid: c.iter().map(|v| v / n).collect(),
                top_terms: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TopicModel {
        topics,
        assignments,
        objective_trace: trace,
    })
}

/// Ranks terms per cluster by `tf(w,c) · log(1 + Ā / f(w))`, where `Ā` is the
/// mean token count per cluster. Zero-score terms are omitted; ties go to
/// the lower term id.
pub fn ctfidf_terms(
    assignments: &[usize],
    docs: &[Vec<u32>],
    num_topics: usize,
    top_k: usize,
) -> Vec<Vec<(u32, f64)>> {
    let mut tf: Vec<BTreeMap<u32, u64>> = vec![BTreeMap::new(); num_topics];
    let mut f: BTreeMap<u32, u64> = BTreeMap::new();
    let mut total = 0u64;
    for (&c, doc) in assignments.iter().zip(docs) {
        for &w in doc {
            *tf[c].entry(w).or_default() += 1;
            *f.entry(w).or_default() += 1;
            total += 1;
        }
    }
    let avg = total as f64 / num_topics.max(1) as f64;
    tf.into_iter()
        .map(|counts| {
            let mut scored: Vec<(u32, f64)> = counts
                .into_iter()
                .map(|(w, c)| (w, c as f64 * (1.0 + avg / f[&w] as f64).ln()))
                .filter(|&(_, s)| s > 0.0)
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            scored.truncate(top_k);
            scored
        })
        .collect()
}

/// Centroids as a `G × dim` key matrix in topic-id order.
pub fn topic_keys<F: Real>(model: &TopicModel) -> Tensor<F> {
    let g = model.topics.len();
    let dim = model.topics.first().map_or(0, |t| t.centroid.len());
    let data: Vec<f64> = model
        .topics
        .iter()
        .flat_map(|t| t.centroid.clone())
        .collect();
    Tensor::from_f64(&[g, dim], &data).expect("centroids share one dimension")
}
