use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged routing decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub corpus: usize,
    pub query_id: String,
    pub prompt_ids: Vec<usize>,
    pub distances: Vec<f64>,
}

/// Per-corpus selection counts over a pool of `pool_size` prompts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UtilizationTable {
    pub pool_size: usize,
    /// corpus → count per prompt id.
    pub counts: BTreeMap<usize, Vec<u64>>,
    /// corpus → number of logged queries.
    pub queries: BTreeMap<usize, u64>,
}

impl UtilizationTable {
    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Counts summed over corpora.
    pub fn totals(&self) -> Vec<u64> {
        let mut out = vec![0; self.pool_size];
        for row in self.counts.values() {
            for (a, b) in out.iter_mut().zip(row) {
                *a += b;
            }
        }
        out
    }

    /// Selection frequency of each prompt (all corpora), summing to 1.
    pub fn frequencies(&self) -> Vec<f64> {
        let totals = self.totals();
        let sum: u64 = totals.iter().sum();
        if sum == 0 {
            return vec![0.0; self.pool_size];
        }
        totals.iter().map(|&c| c as f64 / sum as f64).collect()
    }

    /// Number of prompts whose frequency is strictly above `1/M`.
    pub fn above_uniform(&self) -> usize {
        if self.pool_size == 0 {
            return 0;
        }
        let threshold = 1.0 / self.pool_size as f64;
        self.frequencies()
            .iter()
            .filter(|&&f| f > threshold + 1e-12)
            .count()
    }

    /// Fraction of the pool selected at least once.
    pub fn used_fraction(&self) -> f64 {
        if self.pool_size == 0 {
            return 0.0;
        }
        let used = self.totals().iter().filter(|&&c| c > 0).count();
        used as f64 / self.pool_size as f64
    }

    /// Largest single-prompt frequency.
    pub fn concentration(&self) -> f64 {
        self.frequencies().into_iter().fold(0.0, f64::max)
    }

    /// Writes `corpus_id,prompt_id,count,frequency` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["corpus_id", "prompt_id", "count", "frequency"])
            .map_err(csv_err)?;
        for (corpus, row) in &self.counts {
            let sum: u64 = row.iter().sum();
            for (id, &c) in row.iter().enumerate() {
                let f = if sum == 0 { 0.0 } else { c as f64 / sum as f64 };
                out.write_record([
                    corpus.to_string(),
                    id.to_string(),
                    c.to_string(),
                    format!("{f:.6}"),
                ])
                .map_err(csv_err)?;
            }
        }
        out.flush().map_err(|e| Error::Csv(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

/// Aggregates a selection log; an empty log gives an empty table.
pub fn utilization_stats(log: &[SelectionRecord], pool_size: usize) -> Result<UtilizationTable> {
    let mut table = UtilizationTable {
        pool_size,
        ..Default::default()
    };
    for rec in log {
        let row = table
            .counts
            .entry(rec.corpus)
            .or_insert_with(|| vec![0; pool_size]);
        for &id in &rec.prompt_ids {
            if id >= pool_size {
                return Err(Error::Index {
                    index: id,
                    len: pool_size,
                });
            }
            row[id] += 1;
        }
        *table.queries.entry(rec.corpus).or_default() += 1;
    }
    Ok(table)
}

/// Writes the selection log as `corpus_id,query_id,prompt_ids,distances`,
/// with list fields joined by `;`.
pub fn write_selection_log<W: Write>(log: &[SelectionRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["corpus_id", "query_id", "prompt_ids", "distances"])
        .map_err(csv_err)?;
    for rec in log {
        let ids: Vec<String> = rec.prompt_ids.iter().map(|i| i.to_string()).collect();
        let ds: Vec<String> = rec.distances.iter().map(|d| format!("{d:.8}")).collect();
        out.write_record([
            rec.corpus.to_string(),
            rec.query_id.clone(),
            ids.join(";"),
            ds.join(";"),
        ])
        .map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::Csv(e.to_string()))
}
