//! Experiment runs on disk: configuration, checkpoints, and the report
//! files written for each strategy.
//!
//! A run directory looks like
//!
//! ```text
//! <out>/<STRATEGY>-<hash>/
//!   config.json
//!   checkpoints/t0 … t<T>/   manifest.json + one .bin per tensor
//!   selections/t<t>.jsonl
//!   perf_matrix.csv  utilization.csv  trace.csv  summary.json
//!   topics.json              (topic-keyed pools only)
//! ```

mod checkpoint;
mod config;
mod report;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, EntryMeta, Manifest, PoolMeta, SegmentMeta,
    TensorEntry, MANIFEST,
};
pub use config::{DataSource, RunConfig};
pub use report::{
    aggregate, cl_trace, write_sweep_csv, write_table_csv, write_trace_csv, MeanStd, MetricBlock,
    Summary, SweepSummary, TraceRow, UtilizationSummary,
};

use crate::continual::{
    evaluate_row, run_schedule, train_initial, BaseState, DataStore, ScheduleResult,
};
use crate::error::{Error, Result};
use crate::eval::{format_value, Metric, RetrievalMetrics};
use crate::numerics::Real;
use crate::prompts::{utilization_stats, SelectionRecord};
use crate::retrieval::{Model, Routing};

/// Element type of experiment runs.
pub type RunFloat = f32;

pub const PERF_CSV: &str = "perf_matrix.csv";
pub const UTILIZATION_CSV: &str = "utilization.csv";
pub const TRACE_CSV: &str = "trace.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CONFIG_JSON: &str = "config.json";

pub fn checkpoint_dir(run_dir: &Path, t: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("t{t}"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(&dir.join(CONFIG_JSON), cfg)
}

fn write_selections(path: &Path, log: &[SelectionRecord]) -> Result<()> {
    let mut w = create(path)?;
    for rec in log {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains `Θ_0` on `D_0` and, given a directory, saves it as checkpoint `t0`.
pub fn train_base(
    cfg: &RunConfig,
    store: &DataStore,
    dir: Option<&Path>,
) -> Result<BaseState<RunFloat>> {
    cfg.validate()?;
    let base = train_initial::<RunFloat>(store, &cfg.plan, &cfg.encoder, cfg.seed)?;
    if let Some(dir) = dir {
        write_config(dir, cfg)?;
        save_checkpoint(
            &checkpoint_dir(dir, 0),
            &base.model,
            &cfg.hash(),
            0,
            Some(&base.report),
        )?;
    }
    Ok(base)
}

/// Loads a `t = 0` checkpoint as the starting point of a schedule.
pub fn load_base(dir: &Path, cfg: &RunConfig) -> Result<BaseState<RunFloat>> {
    let (model, manifest) = load_checkpoint::<RunFloat>(dir)?;
    if manifest.timestep != 0 {
        return Err(Error::Data(format!(
            "{} holds timestep {}, a base checkpoint is needed",
            dir.display(),
            manifest.timestep
        )));
    }
    if manifest.encoder != cfg.encoder {
        return Err(Error::Config(
            "the base checkpoint was trained with a different encoder configuration".into(),
        ));
    }
    let report = manifest
        .report
        .ok_or_else(|| Error::Data("base checkpoint carries no training report".into()))?;
    Ok(BaseState { model, report })
}

/// Everything a finished continual run produced.
pub struct RunOutput {
    pub dir: PathBuf,
    pub result: ScheduleResult<RunFloat>,
    pub summary: Summary,
}

/// Runs the schedule from `base`, writing checkpoints, selection logs and
/// reports under `dir`.
pub fn continue_run(
    cfg: &RunConfig,
    store: &DataStore,
    base: &BaseState<RunFloat>,
    dir: &Path,
) -> Result<RunOutput> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_config(dir, cfg)?;
    let hash = cfg.hash();
    let result = run_schedule(store, &cfg.plan, base, cfg.seed, &mut |o| {
        save_checkpoint(&checkpoint_dir(dir, o.t), o.model, &hash, o.t, Some(o.report))?;
        write_selections(
            &dir.join("selections").join(format!("t{}.jsonl", o.t)),
            o.selections,
        )
    })?;
    let summary = write_reports(dir, cfg, &result)?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        result,
        summary,
    })
}

/// Writes the performance matrix, utilization table, trace and summary.
pub fn write_reports<F: Real>(
    dir: &Path,
    cfg: &RunConfig,
    result: &ScheduleResult<F>,
) -> Result<Summary> {
    let mut w = create(&dir.join(PERF_CSV))?;
    result.perf.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io(dir.join(PERF_CSV), e))?;

    let pool_size = result.model.pool.as_ref().map_or(0, |p| p.len());
    let last_log = result.selection_logs.last().map_or(&[][..], |l| l.as_slice());
    let table = utilization_stats(last_log, pool_size)?;
    let mut w = create(&dir.join(UTILIZATION_CSV))?;
    table.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io(dir.join(UTILIZATION_CSV), e))?;

    let trace = cl_trace(&result.perf)?;
    let mut w = create(&dir.join(TRACE_CSV))?;
    write_trace_csv(&trace, &mut w)?;
    w.flush().map_err(|e| Error::io(dir.join(TRACE_CSV), e))?;

    if let Some(tm) = &result.topic_model {
        tm.save(&dir.join("topics.json"))?;
    }
    let summary = Summary::from_result(result, cfg.seed, &cfg.hash())?;
    write_json(&dir.join(SUMMARY_JSON), &summary)?;
    Ok(summary)
}

/// Evaluates a checkpoint on the test sets of every corpus it has indexed.
pub fn eval_checkpoint(
    cfg: &RunConfig,
    store: &DataStore,
    dir: &Path,
) -> Result<(usize, Vec<RetrievalMetrics>)> {
    let (model, manifest) = load_checkpoint::<RunFloat>(dir)?;
    let t = manifest.timestep;
    if t >= store.num_corpora() {
        return Err(Error::Data(format!(
            "checkpoint at timestep {t} but the timeline has {} corpora",
            store.num_corpora()
        )));
    }
    let (row, _) = evaluate_row(&model, store, t, &cfg.plan)?;
    Ok((t, row))
}

/// `metric,t,i,value` lines for one row, in the form used by the
/// performance-matrix CSV (without header).
pub fn row_lines(t: usize, row: &[RetrievalMetrics]) -> Vec<String> {
    let mut out = Vec::new();
    for m in Metric::ALL {
        for (i, r) in row.iter().enumerate() {
            out.push(format!("{},{t},{i},{}", m.name(), format_value(r.get(m))));
        }
    }
    out
}

/// Lines of a performance-matrix CSV belonging to row `t`.
pub fn perf_csv_row(text: &str, t: usize) -> Vec<String> {
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1) == Some(t.to_string().as_str()))
        .map(str::to_string)
        .collect()
}

/// Trains a fresh base and runs the schedule in memory.
pub fn run_in_memory(cfg: &RunConfig) -> Result<(ScheduleResult<RunFloat>, Summary)> {
    let store = cfg.store()?;
    let base = train_base(cfg, &store, None)?;
    let result = run_schedule(&store, &cfg.plan, &base, cfg.seed, &mut |_| Ok(()))?;
    let summary = Summary::from_result(&result, cfg.seed, &cfg.hash())?;
    Ok((result, summary))
}

/// Model forward on a probe batch, as raw little-endian bytes of every
/// `h_q`; equal bytes mean bit-identical outputs.
pub fn probe_bytes<F: Real>(model: &Model<F>, queries: &[Vec<u32>]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for q in queries {
        let enc = model.encode(q, &Routing::Select)?;
        for &v in enc.h_q() {
            v.extend_le(&mut out);
        }
    }
    Ok(out)
}
