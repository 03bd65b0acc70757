use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use promptdsi::continual::{evaluate_queries, Phase, StrategyTag};
use promptdsi::data::{save_jsonl, Split};
use promptdsi::encoder::SelectionMode;
use promptdsi::eval::Metric;
use promptdsi::numerics::Tensor;
use promptdsi::par::Exec;
use promptdsi::prompts::{allocate_for_timestep, PromptStrategy};
use promptdsi::retrieval::Model;
use promptdsi::rng;
use promptdsi::run::{
    self, aggregate, continue_run as run_continue, eval_checkpoint, load_base, load_checkpoint,
    perf_csv_row, row_lines, train_base as run_train_base, write_sweep_csv, write_table_csv,
    DataSource, RunConfig, RunFloat, Summary, SweepSummary,
};
use promptdsi::Error;

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    if let DataSource::Jsonl(path) = &cfg.data {
        bail!(Error::Config(format!(
            "gen-data needs a synthetic data spec, the config reads {}",
            path.display()
        )));
    }
    let tl = cfg.timeline()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_jsonl(&tl, out)?;
    let docs: usize = tl.corpora.iter().map(|c| c.docs.len()).sum();
    let queries: usize = tl.corpora.iter().map(|c| c.queries.len()).sum();
    println!(
        "wrote {} corpora, {docs} documents, {queries} queries to {}",
        tl.len(),
        out.display()
    );
    Ok(())
}

pub fn train_base(cfg: &RunConfig, out: &Path) -> Result<()> {
    let store = cfg.store()?;
    let base = run_train_base(cfg, &store, Some(out))?;
    println!(
        "base trained for {} epochs in {:.1}s; final loss {:.4}",
        base.report.epochs,
        base.report.wall_seconds,
        base.report.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    if let Some(v) = base.report.val {
        println!(
            "D_0 validation hits@1 {:.3} hits@10 {:.3} mrr@10 {:.3}",
            v.hits1, v.hits10, v.mrr10
        );
    }
    println!("checkpoint: {}", run::checkpoint_dir(out, 0).display());
    Ok(())
}

fn print_summary(s: &Summary, dir: &Path) {
    println!("run directory: {}", dir.display());
    println!(
        "{}: D_0 hits@10 {:.3} -> {:.3}, A_{t} hits@10 {:.3}, F_{t} {:.3}, LA_{t} {:.3}, params {}",
        s.strategy,
        s.d0_initial.hits10,
        s.d0.hits10,
        s.average.hits10,
        s.forgetting.hits10,
        s.learning.hits10,
        s.params.total(),
        t = s.horizon,
    );
    if let Some(u) = &s.utilization {
        println!(
            "prompt utilization: {} of {} prompts above 1/M",
            u.above_uniform, u.pool_size
        );
    }
}

fn with_out_dir(cfg: &RunConfig, out: &Path) -> RunConfig {
    RunConfig {
        out_dir: Some(out.to_path_buf()),
        ..cfg.clone()
    }
}

pub fn continue_run(cfg: &RunConfig, base: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = with_out_dir(cfg, out);
    let store = cfg.store()?;
    let base = match base {
        Some(dir) => load_base(dir, &cfg)?,
        None => run_train_base(&cfg, &store, None)?,
    };
    let output = run_continue(&cfg, &store, &base, &cfg.run_dir())?;
    print_summary(&output.summary, &output.dir);
    Ok(())
}

pub fn eval(checkpoint: &Path, config: Option<&Path>) -> Result<()> {
    let run_dir = checkpoint
        .parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let config_path = config.map_or_else(|| run_dir.join(run::CONFIG_JSON), Path::to_path_buf);
    let cfg = RunConfig::load(&config_path)
        .with_context(|| format!("loading {}", config_path.display()))?;
    let store = cfg.store()?;
    let (t, row) = eval_checkpoint(&cfg, &store, checkpoint)?;
    let lines = row_lines(t, &row);
    for l in &lines {
        println!("{l}");
    }
    let perf = run_dir.join(run::PERF_CSV);
    if perf.exists() {
        let text = fs::read_to_string(&perf).map_err(|e| Error::io(&perf, e))?;
        if perf_csv_row(&text, t) != lines {
            bail!(Error::Numeric(format!(
                "row {t} differs from {}",
                perf.display()
            )));
        }
        println!("row {t} matches {} bit for bit", perf.display());
    }
    Ok(())
}

fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join(run::SUMMARY_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let s = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(s)
}

fn sweeps_by_strategy(summaries: &[Summary]) -> Result<Vec<SweepSummary>> {
    let mut groups: BTreeMap<String, Vec<Summary>> = BTreeMap::new();
    for s in summaries {
        groups.entry(s.strategy.to_string()).or_default().push(s.clone());
    }
    Ok(groups
        .values()
        .map(|g| aggregate(g))
        .collect::<promptdsi::Result<_>>()?)
}

fn write_tables(out: &Path, summaries: &[Summary]) -> Result<()> {
    create_dir(out)?;
    let table = out.join("table.csv");
    write_table_csv(
        summaries,
        File::create(&table).map_err(|e| Error::io(&table, e))?,
    )?;
    write_json(&out.join("table.json"), &summaries)?;
    let sweeps = sweeps_by_strategy(summaries)?;
    let sweep = out.join("sweep.csv");
    write_sweep_csv(&sweeps, File::create(&sweep).map_err(|e| Error::io(&sweep, e))?)?;
    write_json(&out.join("sweep.json"), &sweeps)?;
    Ok(())
}

pub fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let summaries = runs
        .iter()
        .map(|d| read_summary(d))
        .collect::<Result<Vec<_>>>()?;
    write_tables(out, &summaries)?;
    for s in &summaries {
        println!(
            "{:<22} seed {:<3} D_0 hits@10 {:6.2}  A hits@10 {:6.2}  F hits@10 {:6.2}  LA hits@10 {:6.2}",
            s.strategy.to_string(),
            s.seed,
            100.0 * s.d0.hits10,
            100.0 * s.average.hits10,
            100.0 * s.forgetting.hits10,
            100.0 * s.learning.hits10,
        );
    }
    println!("tables written to {}", out.display());
    Ok(())
}

/// A model with a pool at `t = 1`, untrained beyond what the checkpoint
/// holds: invocation counts and timings do not depend on the weights.
fn bench_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model<RunFloat>> {
    let mut model = match checkpoint {
        Some(dir) => load_checkpoint::<RunFloat>(dir)?.0,
        None => {
            let store = cfg.store()?;
            let mut m = Model::<RunFloat>::new(cfg.encoder.clone(), &mut rng::stream(cfg.seed, "init"))?;
            let docs = store.doc_ids(Phase::Eval, 0)?;
            m.index_corpus(&docs, &mut rng::stream(cfg.seed, "expand/0"))?;
            m
        }
    };
    if model.pool.is_none() {
        let strategy = cfg.plan.strategy.prompt_strategy().unwrap_or(PromptStrategy::L2p);
        let mut r = rng::stream(cfg.seed, "pool/1");
        let keys = (strategy == PromptStrategy::Topic)
            .then(|| Tensor::randn(&[cfg.plan.num_topics, model.dim()], 1.0, &mut r));
        let (pool, _) = allocate_for_timestep(
            None,
            strategy,
            &cfg.plan.pool,
            &model.encoder.config.prompt_layers,
            model.dim(),
            1,
            keys.as_ref(),
            &mut r,
        )?;
        model.pool = Some(pool);
    }
    Ok(model)
}

#[derive(serde::Serialize)]
struct PassStats {
    layer_invocations_per_pass: u64,
    seconds_per_pass: f64,
    hits10: f64,
}

pub fn bench_pass(cfg: &RunConfig, checkpoint: Option<&Path>, repeats: usize) -> Result<()> {
    if repeats == 0 {
        bail!(Error::Config("--repeats must be positive".into()));
    }
    let store = cfg.store()?;
    let model = bench_model(cfg, checkpoint)?;
    let indexed = model.registry.segments().len().min(store.num_corpora());
    let mut queries = Vec::new();
    for i in 0..indexed {
        queries.extend(store.queries(Phase::Eval, i, Split::Test)?);
    }
    let mut stats = BTreeMap::new();
    for (name, mode) in [
        ("single_pass", SelectionMode::SinglePassAvg),
        ("two_pass", SelectionMode::TwoPassCls),
    ] {
        let mut m = model.clone();
        m.encoder.config.selection = mode;
        m.encoder.reset_counter();
        let started = Instant::now();
        let mut hits10 = 0.0;
        for _ in 0..repeats {
            hits10 = evaluate_queries(&m, &queries, Exec::Sequential)?.0.get(Metric::Hits10);
        }
        let seconds = started.elapsed().as_secs_f64() / repeats as f64;
        stats.insert(
            name,
            PassStats {
                layer_invocations_per_pass: m.encoder.layer_invocations() / repeats as u64,
                seconds_per_pass: seconds,
                hits10,
            },
        );
    }
    let single = &stats["single_pass"];
    let two = &stats["two_pass"];
    let ratio = two.layer_invocations_per_pass as f64 / single.layer_invocations_per_pass as f64;
    let speedup = two.seconds_per_pass / single.seconds_per_pass;
    let report = serde_json::json!({
        "queries": queries.len(),
        "repeats": repeats,
        "single_pass": single,
        "two_pass": two,
        "invocation_ratio": ratio,
        "wall_speedup": speedup,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn seed_sweep(
    cfg: &RunConfig,
    seeds: &[u64],
    strategies: &[StrategyTag],
    out: &Path,
) -> Result<()> {
    if seeds.is_empty() {
        bail!(Error::Config("no seeds given".into()));
    }
    let strategies = if strategies.is_empty() {
        vec![cfg.plan.strategy]
    } else {
        strategies.to_vec()
    };
    let mut summaries = Vec::new();
    for &seed in seeds {
        let seeded = with_out_dir(&cfg.with_seed(seed), out);
        let store = seeded.store()?;
        let base = run_train_base(&seeded, &store, None)?;
        for &s in &strategies {
            let mut c = seeded.clone();
            c.plan.strategy = s;
            let output = run_continue(&c, &store, &base, &c.run_dir())?;
            print_summary(&output.summary, &output.dir);
            summaries.push(output.summary);
        }
    }
    write_tables(out, &summaries)?;
    for sweep in sweeps_by_strategy(&summaries)? {
        let get = |k: &str| sweep.stats.get(k).map_or((f64::NAN, f64::NAN), |v| (v.mean, v.std));
        let (a, a_sd) = get("average.hits@10");
        let (d, d_sd) = get("d0.hits@10");
        println!(
            "{:<22} D_0 hits@10 {:6.2} ± {:5.2}   A hits@10 {:6.2} ± {:5.2}   ({} seeds)",
            sweep.strategy.to_string(),
            100.0 * d,
            100.0 * d_sd,
            100.0 * a,
            100.0 * a_sd,
            sweep.seeds.len()
        );
    }
    Ok(())
}
