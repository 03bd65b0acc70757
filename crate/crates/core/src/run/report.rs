use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::continual::{ScheduleResult, StrategyTag};
use crate::error::{Error, Result};
use crate::eval::{
    cl_metrics, mean_std, memory_accounting, params_accounting, MemoryReport, Metric,
    ParamsReport, PerfMatrices, PerfMatrix,
};
use crate::numerics::Real;
use crate::prompts::{utilization_stats, UtilizationTable};

/// One value per metric.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricBlock {
    #[serde(rename = "hits@1")]
    pub hits1: f64,
    #[serde(rename = "hits@10")]
    pub hits10: f64,
    #[serde(rename = "mrr@10")]
    pub mrr10: f64,
}

impl MetricBlock {
    fn from_fn(mut f: impl FnMut(&PerfMatrix) -> f64, perf: &PerfMatrices) -> Self {
        MetricBlock {
            hits1: f(perf.metric(Metric::Hits1)),
            hits10: f(perf.metric(Metric::Hits10)),
            mrr10: f(perf.metric(Metric::Mrr10)),
        }
    }

    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Hits1 => self.hits1,
            Metric::Hits10 => self.hits10,
            Metric::Mrr10 => self.mrr10,
        }
    }
}

/// Continual-learning metrics after one timestep, for one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub metric: Metric,
    pub t: usize,
    pub d0: f64,
    pub average: Option<f64>,
    pub learning: Option<f64>,
    pub forgetting: Option<f64>,
    pub forgetting_d0: f64,
}

/// `A_t`, `LA_t`, `F_t` and the `D_0` figures at every timestep.
pub fn cl_trace(perf: &PerfMatrices) -> Result<Vec<TraceRow>> {
    let mut out = Vec::new();
    for m in Metric::ALL {
        let p = perf.metric(m);
        for t in 0..p.rows() {
            let cl = cl_metrics(p, t)?;
            out.push(TraceRow {
                metric: m,
                t,
                d0: p.get(t, 0),
                average: cl.average,
                learning: cl.learning,
                forgetting: cl.forgetting,
                forgetting_d0: cl.forgetting_d0,
            });
        }
    }
    Ok(out)
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Csv(e.to_string());
    out.write_record([
        "metric",
        "t",
        "d0",
        "average",
        "learning",
        "forgetting",
        "forgetting_d0",
    ])
    .map_err(err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for r in rows {
        out.write_record([
            r.metric.name().to_string(),
            r.t.to_string(),
            format!("{:.6}", r.d0),
            opt(r.average),
            opt(r.learning),
            opt(r.forgetting),
            format!("{:.6}", r.forgetting_d0),
        ])
        .map_err(err)?;
    }
    out.flush().map_err(|e| Error::Csv(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSummary {
    pub pool_size: usize,
    pub above_uniform: usize,
    pub used_fraction: f64,
    pub concentration: f64,
}

impl From<&UtilizationTable> for UtilizationSummary {
    fn from(t: &UtilizationTable) -> Self {
        UtilizationSummary {
            pool_size: t.pool_size,
            above_uniform: t.above_uniform(),
            used_fraction: t.used_fraction(),
            concentration: t.concentration(),
        }
    }
}

/// The shape of one results-table row: `D_0` performance at the final
/// timestep, `A_T`, `F_T`, `LA_T`, trainable parameters and memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: StrategyTag,
    pub seed: u64,
    pub config_hash: String,
    pub horizon: usize,
    pub d0_initial: MetricBlock,
    pub d0: MetricBlock,
    pub d0_forgetting: MetricBlock,
    pub average: MetricBlock,
    pub forgetting: MetricBlock,
    pub learning: MetricBlock,
    pub params: ParamsReport,
    /// Encoder scalars, nonzero only when the strategy fine-tunes it.
    pub encoder_params: u64,
    pub memory: MemoryReport,
    pub utilization: Option<UtilizationSummary>,
    pub layer_invocations: u64,
    pub wall_seconds: f64,
}

impl Summary {
    pub fn from_result<F: Real>(
        result: &ScheduleResult<F>,
        seed: u64,
        config_hash: &str,
    ) -> Result<Self> {
        let perf = &result.perf;
        let horizon = perf.rows().checked_sub(1).ok_or_else(|| {
            Error::Contract("summary of an empty performance matrix".into())
        })?;
        if horizon == 0 {
            return Err(Error::Contract("summary needs at least one increment".into()));
        }
        let at = |f: fn(&crate::eval::ClMetrics) -> f64| {
            move |p: &PerfMatrix| cl_metrics(p, horizon).map(|c| f(&c)).unwrap_or(f64::NAN)
        };
        let model = &result.model;
        let dim = model.dim() as u64;
        let tag = result.strategy;
        let total_docs = model.classifier.num_docs() as u64;
        let d0_docs = model.registry.segment(0).map_or(0, |s| s.len()) as u64;

        let first_frozen = result
            .reports
            .get(1)
            .map(|r| &r.frozen_at_start)
            .cloned()
            .unwrap_or_default();
        let prompt_scalars: u64 = model.pool.as_ref().map_or(0, |p| {
            p.named()
                .into_iter()
                .filter(|(name, _, _)| !first_frozen.contains_key(name))
                .map(|(_, t, _)| t.len() as u64)
                .sum()
        });
        let (rows, encoder_params) = if tag.freezes_encoder() {
            (total_docs - d0_docs, 0)
        } else {
            (total_docs, model.encoder.params.num_scalars() as u64)
        };
        let params = params_accounting(rows, dim, prompt_scalars);

        let memory = match &model.pool {
            Some(p) => memory_accounting(
                dim,
                p.len() as u64,
                (p.prompt_len * p.layers.len()) as u64,
                F::BYTES as u64,
                None,
            ),
            None => memory_accounting(
                dim,
                0,
                0,
                F::BYTES as u64,
                (tag == StrategyTag::CachedCentroid).then_some(result.centroid_columns as u64),
            ),
        };
        let utilization = match (&model.pool, result.selection_logs.last()) {
            (Some(p), Some(log)) => Some(UtilizationSummary::from(&utilization_stats(
                log,
                p.len(),
            )?)),
            _ => None,
        };
        let continual = &result.reports[1..];
        Ok(Summary {
            strategy: tag,
            seed,
            config_hash: config_hash.to_string(),
            horizon,
            d0_initial: MetricBlock::from_fn(|p| p.get(0, 0), perf),
            d0: MetricBlock::from_fn(|p| p.get(horizon, 0), perf),
            d0_forgetting: MetricBlock::from_fn(at(|c| c.forgetting_d0), perf),
            average: MetricBlock::from_fn(at(|c| c.average.unwrap_or(f64::NAN)), perf),
            forgetting: MetricBlock::from_fn(at(|c| c.forgetting.unwrap_or(f64::NAN)), perf),
            learning: MetricBlock::from_fn(at(|c| c.learning.unwrap_or(f64::NAN)), perf),
            params,
            encoder_params,
            memory,
            utilization,
            layer_invocations: continual.iter().map(|r| r.layer_invocations).sum(),
            wall_seconds: continual.iter().map(|r| r.wall_seconds).sum(),
        })
    }

    /// Named scalar view used for seed aggregation.
    pub fn scalars(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (block, values) in [
            ("d0", &self.d0),
            ("d0_forgetting", &self.d0_forgetting),
            ("average", &self.average),
            ("forgetting", &self.forgetting),
            ("learning", &self.learning),
        ] {
            for m in Metric::ALL {
                out.push((format!("{block}.{}", m.name()), values.get(m)));
            }
        }
        out.push(("params".into(), self.params.total() as f64));
        if let Some(u) = &self.utilization {
            out.push(("utilization.above_uniform".into(), u.above_uniform as f64));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean ± sample standard deviation of every summary scalar over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub strategy: StrategyTag,
    pub seeds: Vec<u64>,
    pub stats: BTreeMap<String, MeanStd>,
}

pub fn aggregate(summaries: &[Summary]) -> Result<SweepSummary> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::Contract("no runs to aggregate".into()))?;
    if summaries.iter().any(|s| s.strategy != first.strategy) {
        return Err(Error::Contract("aggregating runs of different strategies".into()));
    }
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in summaries {
        for (k, v) in s.scalars() {
            columns.entry(k).or_default().push(v);
        }
    }
    let stats = columns
        .into_iter()
        .filter(|(_, v)| v.len() == summaries.len())
        .map(|(k, v)| {
            let (mean, std) = mean_std(&v);
            (k, MeanStd { mean, std })
        })
        .collect();
    Ok(SweepSummary {
        strategy: first.strategy,
        seeds: summaries.iter().map(|s| s.seed).collect(),
        stats,
    })
}

/// Table rows `strategy,quantity,mean,std`, with values scaled to percent
/// for the retrieval metrics.
pub fn write_sweep_csv<W: Write>(sweeps: &[SweepSummary], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Csv(e.to_string());
    out.write_record(["strategy", "quantity", "mean", "std"])
        .map_err(err)?;
    for s in sweeps {
        for (k, v) in &s.stats {
            let scale = if k.contains('@') { 100.0 } else { 1.0 };
            out.write_record([
                s.strategy.to_string(),
                k.clone(),
                format!("{:.2}", v.mean * scale),
                format!("{:.2}", v.std * scale),
            ])
            .map_err(err)?;
        }
    }
    out.flush().map_err(|e| Error::Csv(e.to_string()))
}

/// One CSV line per strategy in the layout of a results table: `D_0`
/// Hits@1/Hits@10/MRR@10, then `A_T`, `F_T`, `LA_T` for the same metrics,
/// then trainable parameters. Retrieval numbers are percentages.
pub fn write_table_csv<W: Write>(summaries: &[Summary], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Csv(e.to_string());
    let mut header = vec!["strategy".to_string()];
    for block in ["d0", "average", "forgetting", "learning"] {
        for m in Metric::ALL {
            header.push(format!("{block}.{}", m.name()));
        }
    }
    header.push("params".into());
    out.write_record(&header).map_err(err)?;
    for s in summaries {
        let mut rec = vec![s.strategy.to_string()];
        for block in [&s.d0, &s.average, &s.forgetting, &s.learning] {
            for m in Metric::ALL {
                rec.push(format!("{:.2}", 100.0 * block.get(m)));
            }
        }
        rec.push(s.params.total().to_string());
        out.write_record(&rec).map_err(err)?;
    }
    out.flush().map_err(|e| Error::Csv(e.to_string()))
}
