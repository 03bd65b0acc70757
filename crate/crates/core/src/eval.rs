//! Retrieval metrics, continual-learning metrics and the memory/parameter
//! arithmetic for prompt pools and centroid caches.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 1 if `gold` is among the first `k` docids.
pub fn hits_at_k(ranked: &[usize], gold: usize, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&d| d == gold) {
        1.0
    } else {
        0.0
    }
}

/// Reciprocal rank of `gold` within the first `k` docids, else 0.
pub fn mrr_at_k(ranked: &[usize], gold: usize, k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|&d| d == gold)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Per-corpus metric triple, each a macro average over queries.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub hits1: f64,
    pub hits10: f64,
    pub mrr10: f64,
}

impl RetrievalMetrics {
    /// Averages per-query `(ranked docids, gold)` pairs.
    pub fn from_rankings<'a, I>(rankings: I) -> Self
    where
        I: IntoIterator<Item = (&'a [usize], usize)>,
    {
        let mut m = RetrievalMetrics::default();
        let mut n = 0usize;
        for (r, g) in rankings {
            m.hits1 += hits_at_k(r, g, 1);
            m.hits10 += hits_at_k(r, g, 10);
            m.mrr10 += mrr_at_k(r, g, 10);
            n += 1;
        }
        if n > 0 {
            let s = 1.0 / n as f64;
            m.hits1 *= s;
            m.hits10 *= s;
            m.mrr10 *= s;
        }
        m
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Hits1 => self.hits1,
            Metric::Hits10 => self.hits10,
            Metric::Mrr10 => self.mrr10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Hits1,
    Hits10,
    Mrr10,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Hits1, Metric::Hits10, Metric::Mrr10];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Hits1 => "hits@1",
            Metric::Hits10 => "hits@10",
            Metric::Mrr10 => "mrr@10",
        }
    }
}

/// Lower-triangular `P[t][i]`, `0 ≤ i ≤ t`: the metric on corpus `i` after
/// training on corpus `t`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerfMatrix {
    rows: Vec<Vec<f64>>,
}

impl PerfMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut p = PerfMatrix::new();
        for r in rows {
            p.push_row(r)?;
        }
        Ok(p)
    }

    /// Appends row `t`, which must hold exactly `t + 1` values.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if row.len() != t + 1 {
            return Err(Error::Contract(format!(
                "row {t} needs {} values, got {}",
                t + 1,
                row.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.rows[t][i]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t]
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// The three metric matrices of one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerfMatrices {
    pub hits1: PerfMatrix,
    pub hits10: PerfMatrix,
    pub mrr10: PerfMatrix,
}

impl PerfMatrices {
    pub fn push_row(&mut self, row: &[RetrievalMetrics]) -> Result<()> {
        for m in Metric::ALL {
            self.metric_mut(m)
                .push_row(row.iter().map(|r| r.get(m)).collect())?;
        }
        Ok(())
    }

    pub fn metric(&self, m: Metric) -> &PerfMatrix {
        match m {
            Metric::Hits1 => &self.hits1,
            Metric::Hits10 => &self.hits10,
            Metric::Mrr10 => &self.mrr10,
        }
    }

    fn metric_mut(&mut self, m: Metric) -> &mut PerfMatrix {
        match m {
            Metric::Hits1 => &mut self.hits1,
            Metric::Hits10 => &mut self.hits10,
            Metric::Mrr10 => &mut self.mrr10,
        }
    }

    pub fn rows(&self) -> usize {
        self.hits1.rows()
    }

    /// `metric,t,i,value` rows, values in [`format_value`] form.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Csv(e.to_string());
        out.write_record(["metric", "t", "i", "value"])
            .map_err(csv_err)?;
        for m in Metric::ALL {
            let p = self.metric(m);
            for t in 0..p.rows() {
                for i in 0..=t {
                    out.write_record([
                        m.name().to_string(),
                        t.to_string(),
                        i.to_string(),
                        format_value(p.get(t, i)),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        out.flush().map_err(|e| Error::Csv(e.to_string()))
    }
}

/// Text form of a metric value in CSV reports: 17 significant digits, so
/// parsing it back yields the same `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v:.17e}")
}

/// Average performance, learning performance, forgetting and `D_0` change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClMetrics {
    /// `(1/t) Σ_{i=1..t} P[t][i]`; absent at `t = 0`.
    pub average: Option<f64>,
    /// `(1/t) Σ_{i=1..t} P[i][i]`; absent at `t = 0`.
    pub learning: Option<f64>,
    /// `(1/t) Σ_{i=0..t−1} max_{i'<t} (P[i'][i] − P[t][i])`; absent at `t = 0`.
    pub forgetting: Option<f64>,
    /// `max(P[0][0] − P[t][0], 0)`.
    pub forgetting_d0: f64,
    /// `P[t][0] − P[0][0]`.
    pub d0_change: f64,
}

pub fn cl_metrics(p: &PerfMatrix, t: usize) -> Result<ClMetrics> {
    if t >= p.rows() {
        return Err(Error::Contract(format!(
            "row {t} requested from a matrix with {} rows",
            p.rows()
        )));
    }
    let d0_change = p.get(t, 0) - p.get(0, 0);
    let forgetting_d0 = (-d0_change).max(0.0);
    if t == 0 {
        return Ok(ClMetrics {
            average: None,
            learning: None,
            forgetting: None,
            forgetting_d0,
            d0_change,
        });
    }
    let tf = t as f64;
    let average = (1..=t).map(|i| p.get(t, i)).sum::<f64>() / tf;
    let learning = (1..=t).map(|i| p.get(i, i)).sum::<f64>() / tf;
    let forgetting = (0..t)
        .map(|i| {
            (i..t)
                .map(|ip| p.get(ip, i) - p.get(t, i))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / tf;
    Ok(ClMetrics {
        average: Some(average),
        learning: Some(learning),
        forgetting: Some(forgetting),
        forgetting_d0,
        d0_change,
    })
}

/// Byte counts for a prompt pool and (optionally) a centroid cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub pool_bytes: u64,
    pub cache_bytes: Option<u64>,
}

/// Pool `P ∪ K` holds `dim·M·(m+1)` floats; the cache holds `dim·docs`.
pub fn memory_accounting(
    dim: u64,
    pool_size: u64,
    prompt_len: u64,
    bytes_per_float: u64,
    cache_docs: Option<u64>,
) -> MemoryReport {
    MemoryReport {
        pool_bytes: dim * pool_size * (prompt_len + 1) * bytes_per_float,
        cache_bytes: cache_docs.map(|n| dim * n * bytes_per_float),
    }
}

pub fn kib(bytes: u64) -> f64 {
    bytes as f64 / 1024.0
}

pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

/// Trainable scalars over the continual phase: new classifier rows plus
/// every prompt, key and attention-vector scalar that was trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamsReport {
    pub classifier: u64,
    pub prompts: u64,
}

impl ParamsReport {
    pub fn total(&self) -> u64 {
        self.classifier + self.prompts
    }
}

pub fn params_accounting(new_docids: u64, dim: u64, prompt_scalars: u64) -> ParamsReport {
    ParamsReport {
        classifier: new_docids * dim,
        prompts: prompt_scalars,
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
