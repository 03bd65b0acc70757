//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The default synthetic benchmark (200 + 5×20 documents) is trained once per
//! seed; criteria 3, 4, 6, 7 and 9 read from those shared runs.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use promptdsi::continual::{
    evaluate_queries, run_schedule, train_initial, verify_frozen, BaseState, DataStore, Phase,
    ScheduleResult, StrategyTag, TimestepPlan,
};
use promptdsi::data::{generate_corpora, Split, SyntheticSpec};
use promptdsi::encoder::{EncoderConfig, SelectionMode};
use promptdsi::eval::{
    cl_metrics, kib, memory_accounting, mib, params_accounting, Metric, PerfMatrix,
};
use promptdsi::numerics::{cosine_distance, GradCheckConfig, Tensor};
use promptdsi::par::Exec;
use promptdsi::prompts::{
    allocate_for_timestep, select_topn, utilization_stats, PoolConfig, PromptEntry, PromptPool,
    PromptStrategy, Provenance,
};
use promptdsi::retrieval::{check_model_gradients, LossConfig, Model, Routing, TrainExample};
use promptdsi::rng::stream;
use promptdsi::run::{continue_run, train_base, RunConfig, PERF_CSV};
use promptdsi::topics::mine_topics;
use rand::Rng as _;

/// Criterion 1: max relative error and wall-clock budget.
const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
/// Criterion 2.
const ORACLE_POOLS: usize = 1000;
/// Criterion 6: Hits@10 points (as a fraction).
const PASS_MODE_GAP: f64 = 0.02;
/// Criterion 7.
const SEEDS: [u64; 3] = [0, 1, 2];
const REQUIRED_SEEDS: usize = 2;
const SEQ_FORGETTING_MIN: f64 = 0.20;
const PROMPT_FORGETTING_MAX: f64 = 0.05;
const BENCHMARK_BUDGET: Duration = Duration::from_secs(600);
/// Criterion 8.
const CL_MATRICES: usize = 1000;
const CL_TOL: f64 = 1e-12;
/// Criterion 9: unit-norm tolerance for f32 keys.
const KEY_NORM_TOL: f64 = 1e-5;

const PROMPT_VARIANTS: [PromptStrategy; 4] = [
    PromptStrategy::L2p,
    PromptStrategy::Spp,
    PromptStrategy::Coda,
    PromptStrategy::Topic,
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct SeedRuns {
    seed: u64,
    store: DataStore,
    base: BaseState<f32>,
    runs: BTreeMap<StrategyTag, ScheduleResult<f32>>,
    elapsed: Duration,
}

impl SeedRuns {
    fn get(&self, tag: StrategyTag) -> &ScheduleResult<f32> {
        &self.runs[&tag]
    }

    fn hits10(&self, tag: StrategyTag) -> &PerfMatrix {
        self.get(tag).perf.metric(Metric::Hits10)
    }

    fn horizon(&self) -> usize {
        self.store.num_corpora() - 1
    }

    fn d0_forgetting(&self, tag: StrategyTag) -> f64 {
        cl_metrics(self.hits10(tag), self.horizon()).unwrap().forgetting_d0
    }

    fn average(&self, tag: StrategyTag) -> f64 {
        cl_metrics(self.hits10(tag), self.horizon())
            .unwrap()
            .average
            .unwrap()
    }

    fn utilization(&self, tag: StrategyTag) -> usize {
        let r = self.get(tag);
        let pool = r.model.pool.as_ref().expect("prompt run has a pool");
        utilization_stats(r.selection_logs.last().unwrap(), pool.len())
            .unwrap()
            .above_uniform()
    }
}

fn benchmark_strategies() -> Vec<StrategyTag> {
    let mut v = vec![
        StrategyTag::SeqFt,
        StrategyTag::ReplayFt,
        StrategyTag::FrozenCls,
    ];
    v.extend(PROMPT_VARIANTS.map(StrategyTag::PromptDsi));
    v.push(StrategyTag::NaivePromptDsi(PromptStrategy::L2p));
    v
}

fn benchmark_encoder() -> EncoderConfig {
    EncoderConfig {
        vocab_size: SyntheticSpec::default().vocab_size,
        ..EncoderConfig::default()
    }
}

fn run_seed(seed: u64) -> SeedRuns {
    let started = Instant::now();
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let store = DataStore::new(generate_corpora(&spec).unwrap()).unwrap();
    let plan = TimestepPlan::default();
    let base = train_initial::<f32>(&store, &plan, &benchmark_encoder(), seed).unwrap();
    let mut runs = BTreeMap::new();
    for tag in benchmark_strategies() {
        let p = TimestepPlan {
            strategy: tag,
            ..plan.clone()
        };
        let r = run_schedule(&store, &p, &base, seed, &mut |_| Ok(())).unwrap();
        runs.insert(tag, r);
    }
    SeedRuns {
        seed,
        store,
        base,
        runs,
        elapsed: started.elapsed(),
    }
}

// ---------------------------------------------------------------- 1

fn grad_model(selection: SelectionMode) -> Model<f64> {
    let cfg = EncoderConfig {
        num_layers: 3,
        dim: 8,
        heads: 2,
        ff_dim: 12,
        max_len: 8,
        vocab_size: 30,
        prompt_layers: vec![2],
        selection,
        init_std: 0.3,
    };
    let mut rng = stream(21, "acceptance-grad");
    let mut m = Model::new(cfg, &mut rng).unwrap();
    let ids: Vec<String> = (0..5).map(|i| format!("a{i}")).collect();
    m.index_corpus(&ids, &mut rng).unwrap();
    m.classifier
        .rows_mut(0..5)
        .iter_mut()
        .for_each(|v| *v *= 20.0);
    m
}

fn grad_batch(offset: usize) -> Vec<TrainExample> {
    [
        vec![0, 3, 7, 9],
        vec![0, 12, 4],
        vec![0, 5, 5, 21, 2],
        vec![0, 28, 1, 6],
    ]
    .into_iter()
    .enumerate()
    .map(|(i, tokens)| TrainExample {
        tokens,
        gold: offset + i % 3,
    })
    .collect()
}

fn criterion_gradients() -> Outcome {
    let started = Instant::now();
    let gc = GradCheckConfig {
        eps: GRAD_EPS,
        tol: GRAD_TOL,
        ..GradCheckConfig::default()
    };
    let mut reports = Vec::new();

    let base = grad_model(SelectionMode::SinglePassAvg);
    let full = LossConfig {
        train_encoder: true,
        classifier_rows: 0..5,
        ..LossConfig::default()
    };
    reports.extend(check_model_gradients(&base, &grad_batch(0), &full, &gc).unwrap());

    for strategy in PROMPT_VARIANTS {
        for mode in [SelectionMode::SinglePassAvg, SelectionMode::TwoPassCls] {
            let mut m = grad_model(mode);
            let mut rng = stream(22, "acceptance-grad-cont");
            m.encoder.frozen = true;
            m.classifier.freeze_all();
            let ids: Vec<String> = (0..3).map(|i| format!("b{i}")).collect();
            m.index_corpus(&ids, &mut rng).unwrap();
            let pool_cfg = PoolConfig {
                pool_size: 3,
                prompt_len: 4,
                coda_prompt_len: 4,
                top_n: 2,
                ..PoolConfig::default()
            };
            let keys = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);
            let (mut pool, _) =
                allocate_for_timestep(None, strategy, &pool_cfg, &[2], 8, 1, Some(&keys), &mut rng)
                    .unwrap();
            for e in pool.entries_mut() {
                e.prompt.scale(3.0);
            }
            m.pool = Some(pool);
            let cfg = LossConfig {
                classifier_rows: 5..8,
                use_match: strategy.uses_match_loss(),
                ..LossConfig::default()
            };
            reports.extend(check_model_gradients(&m, &grad_batch(5), &cfg, &gc).unwrap());
            if strategy == PromptStrategy::Spp {
                let forced = LossConfig {
                    routing: Routing::Force(vec![0]),
                    ..cfg
                };
                reports.extend(check_model_gradients(&m, &grad_batch(5), &forced, &gc).unwrap());
            }
        }
    }
    let elapsed = started.elapsed();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    let kinds = ["prompt", "key", "attn", "classifier", "encoder"];
    let covered = kinds
        .iter()
        .all(|k| reports.iter().any(|r| r.name.contains(k)));
    let pass = covered && reports.iter().all(|r| r.passed(GRAD_TOL)) && elapsed < GRAD_BUDGET;
    outcome(
        pass,
        format!(
            "{} tensors checked, worst {} rel err {:.2e} (< {GRAD_TOL:e}), {:.1}s (< {}s)",
            reports.len(),
            worst.name,
            worst.max_rel_err,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_select_oracle() -> Outcome {
    let mut rng = stream(2024, "acceptance-oracle");
    let dim = 6;
    let mut mismatches = 0;
    for _ in 0..ORACLE_POOLS {
        let m = rng.random_range(1..=8usize);
        let n = rng.random_range(1..=m);
        let mut pool = PromptPool::<f64>::new(PromptStrategy::L2p, 2, dim, n, vec![2]).unwrap();
        let keys: Vec<Vec<f64>> = (0..m)
            .map(|_| Tensor::<f64>::randn(&[dim], 1.0, &mut rng).into_vec())
            .collect();
        for k in &keys {
            pool.push(PromptEntry {
                prompt: Tensor::zeros(&[1, 2, dim]),
                key: Tensor::from_vec(&[dim], k.clone()).unwrap(),
                attn: None,
                prompt_frozen: false,
                key_frozen: false,
                provenance: Provenance::Timestep(1),
            })
            .unwrap();
        }
        let h = Tensor::<f64>::randn(&[dim], 1.0, &mut rng).into_vec();
        let d: Vec<f64> = keys
            .iter()
            .map(|k| cosine_distance(&h, k).unwrap())
            .collect();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for mask in 0u32..(1 << m) {
            if mask.count_ones() as usize != n {
                continue;
            }
            let ids: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let cost: f64 = ids.iter().map(|&i| d[i]).sum();
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, ids));
            }
        }
        let (cost, ids) = best.unwrap();
        let sel = select_topn(&h, &pool).unwrap();
        let mut got = sel.ids.clone();
        got.sort_unstable();
        if got != ids || (sel.match_loss - cost).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches over {ORACLE_POOLS} random pools (M ≤ 8, N ≤ M)"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_freeze_audit(seed0: &SeedRuns) -> Outcome {
    let base_encoder = seed0.base.model.encoder.digest();
    let base_d0 = seed0.base.model.classifier.segment_digest(0);
    let mut checked = 0;
    let mut failures = Vec::new();
    for s in PROMPT_VARIANTS {
        let r = seed0.get(StrategyTag::PromptDsi(s));
        checked += r.frozen_baseline.len();
        let ok = verify_frozen(&r.model, &r.frozen_baseline).is_ok()
            && r.model.encoder.digest() == base_encoder
            && r.model.classifier.segment_digest(0) == base_d0
            && r.frozen_baseline.contains_key("encoder")
            && (0..seed0.horizon())
                .all(|i| r.frozen_baseline.contains_key(&format!("classifier.segment{i}")));
        if !ok {
            failures.push(format!("{s:?}"));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "4 PromptDSI variants, {checked} frozen tensors byte-identical to their pre-run digests{}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; changed in {failures:?}")
            }
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_old_docids(seed0: &SeedRuns) -> Outcome {
    let before = &seed0.base.model;
    let after = &seed0.get(StrategyTag::FrozenCls).model;
    let n0 = before.classifier.num_docs();
    let probes = seed0
        .store
        .queries(Phase::Eval, 0, Split::Test)
        .unwrap();
    let mut identical = 0;
    let mut same_order = 0;
    let order = |s: &[f32]| {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        idx
    };
    for q in &probes {
        let a = before.scores(&q.encoded()).unwrap();
        let b = after.scores(&q.encoded()).unwrap();
        let (a0, b0) = (&a[..n0], &b[..n0]);
        if a0.iter().zip(b0).all(|(x, y)| x.to_bits() == y.to_bits()) {
            identical += 1;
        }
        if order(a0) == order(b0) {
            same_order += 1;
        }
    }
    let n = probes.len();
    outcome(
        n > 0 && identical == n && same_order == n,
        format!(
            "FROZEN_CLS after D_1..D_5: {identical}/{n} probe queries bit-identical on {n0} D_0 docids, order kept for {same_order}/{n}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_arithmetic() -> Outcome {
    let pool = memory_accounting(768, 5, 20, 4, Some(108_617));
    let params = params_accounting(9_874, 768, 0);
    let pool_kib = kib(pool.pool_bytes);
    let cache = pool.cache_bytes.unwrap();
    let cache_mib = mib(cache);
    let params_m = params.total() as f64 / 1e6;
    let pass = pool.pool_bytes == 322_560
        && cache == 333_671_424
        && params.total() == 7_583_232
        && (pool_kib.round() - 315.0).abs() <= 1.0
        && (cache_mib.round() - 318.0).abs() <= 1.0
        && ((params_m * 10.0).round() / 10.0 - 7.6).abs() < 1e-9;
    outcome(
        pass,
        format!(
            "pool {} B = {pool_kib:.1} KiB, cache {cache} B = {cache_mib:.1} MiB, params {} = {params_m:.2}M",
            pool.pool_bytes,
            params.total()
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_single_pass(seeds: &[SeedRuns]) -> Outcome {
    let seed0 = &seeds[0];
    let trained = &seed0.get(StrategyTag::PromptDsi(PromptStrategy::L2p)).model;
    let mut queries = Vec::new();
    for i in 0..seed0.store.num_corpora() {
        queries.extend(seed0.store.queries(Phase::Eval, i, Split::Test).unwrap());
    }
    let mut cost = Vec::new();
    for mode in [SelectionMode::SinglePassAvg, SelectionMode::TwoPassCls] {
        let mut m = trained.clone();
        m.encoder.config.selection = mode;
        // warm-up, then the best of five timed passes
        evaluate_queries(&m, &queries, Exec::Sequential).unwrap();
        m.encoder.reset_counter();
        let mut best = Duration::MAX;
        for _ in 0..5 {
            let t = Instant::now();
            evaluate_queries(&m, &queries, Exec::Sequential).unwrap();
            best = best.min(t.elapsed());
        }
        cost.push((m.encoder.layer_invocations() / 5, best));
    }
    let ratio = cost[1].0 as f64 / cost[0].0 as f64;
    let naive = StrategyTag::NaivePromptDsi(PromptStrategy::L2p);
    let single = StrategyTag::PromptDsi(PromptStrategy::L2p);
    let gaps: Vec<f64> = seeds
        .iter()
        .map(|s| (s.average(single) - s.average(naive)).abs())
        .collect();
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let pass = ratio == 2.0 && cost[0].1 < cost[1].1 && mean_gap <= PASS_MODE_GAP;
    outcome(
        pass,
        format!(
            "invocations {} vs {} (ratio {ratio}), wall {:.1} ms vs {:.1} ms, A_5 Hits@10 gap {:.1} points (per seed {:?})",
            cost[1].0,
            cost[0].0,
            cost[0].1.as_secs_f64() * 1e3,
            cost[1].1.as_secs_f64() * 1e3,
            100.0 * mean_gap,
            gaps.iter().map(|g| format!("{:.1}", 100.0 * g)).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_ordering(seeds: &[SeedRuns]) -> Outcome {
    let mut held = [0usize; 4];
    let mut notes = Vec::new();
    for s in seeds {
        let seq = s.d0_forgetting(StrategyTag::SeqFt);
        let replay = s.d0_forgetting(StrategyTag::ReplayFt);
        let frozen = s.average(StrategyTag::FrozenCls);
        let prompt_forgetting = PROMPT_VARIANTS
            .map(|p| s.d0_forgetting(StrategyTag::PromptDsi(p)))
            .into_iter()
            .fold(0.0, f64::max);
        let prompt_average = PROMPT_VARIANTS
            .map(|p| s.average(StrategyTag::PromptDsi(p)))
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let checks = [
            seq >= SEQ_FORGETTING_MIN,
            prompt_forgetting <= PROMPT_FORGETTING_MAX,
            prompt_average >= frozen,
            replay < seq,
        ];
        for (h, c) in held.iter_mut().zip(checks) {
            *h += c as usize;
        }
        notes.push(format!(
            "seed {}: SEQ {:.1}, worst prompt {:.1}, REPLAY {:.1} D_0 pts; min prompt A_5 {:.1} vs FROZEN {:.1}; {:.0}s",
            s.seed,
            100.0 * seq,
            100.0 * prompt_forgetting,
            100.0 * replay,
            100.0 * prompt_average,
            100.0 * frozen,
            s.elapsed.as_secs_f64()
        ));
    }
    let slowest = seeds.iter().map(|s| s.elapsed).max().unwrap();
    let pass = held.iter().all(|&h| h >= REQUIRED_SEEDS) && slowest < BENCHMARK_BUDGET;
    outcome(
        pass,
        format!(
            "(a) {}/3 (b) {}/3 (c) {}/3 (d) {}/3 seeds hold, slowest seed {:.0}s (< {}s) [{}]",
            held[0],
            held[1],
            held[2],
            held[3],
            slowest.as_secs_f64(),
            BENCHMARK_BUDGET.as_secs(),
            notes.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 8

fn loop_oracle(p: &[Vec<f64>], t: usize) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut la = 0.0;
    let mut f = 0.0;
    for i in 1..=t {
        a += p[t][i];
        la += p[i][i];
    }
    for i in 0..t {
        let mut best = f64::NEG_INFINITY;
        for (ip, row) in p.iter().enumerate().take(t) {
            if ip >= i {
                best = best.max(row[i] - p[t][i]);
            }
        }
        f += best;
    }
    let n = t as f64;
    (a / n, la / n, f / n)
}

fn criterion_cl_oracle() -> Outcome {
    let mut rng = stream(8, "acceptance-cl");
    let mut worst: f64 = 0.0;
    for _ in 0..CL_MATRICES {
        let t = rng.random_range(1..=10usize);
        let rows: Vec<Vec<f64>> = (0..=t)
            .map(|r| (0..=r).map(|_| rng.random::<f64>()).collect())
            .collect();
        let m = cl_metrics(&PerfMatrix::from_rows(rows.clone()).unwrap(), t).unwrap();
        let (a, la, f) = loop_oracle(&rows, t);
        worst = worst
            .max((m.average.unwrap() - a).abs())
            .max((m.learning.unwrap() - la).abs())
            .max((m.forgetting.unwrap() - f).abs());
    }
    let hand = PerfMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7], vec![0.75, 0.6, 0.65]])
        .unwrap();
    let h = cl_metrics(&hand, 2).unwrap();
    let hand_ok = (h.average.unwrap() - 0.625).abs() < CL_TOL
        && (h.learning.unwrap() - 0.675).abs() < CL_TOL
        && (h.forgetting.unwrap() - 0.125).abs() < CL_TOL;
    outcome(
        worst < CL_TOL && hand_ok,
        format!(
            "max deviation {worst:.1e} over {CL_MATRICES} matrices (< {CL_TOL:e}); hand case A_2={:.3} LA_2={:.3} F_2={:.3}",
            h.average.unwrap(),
            h.learning.unwrap(),
            h.forgetting.unwrap()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_topics(seeds: &[SeedRuns]) -> Outcome {
    let mut rng = stream(9, "acceptance-topics");
    let mut monotone = true;
    for trial in 0..20 {
        let pts: Vec<Vec<f64>> = (0..60)
            .map(|_| Tensor::<f64>::randn(&[5], 1.0, &mut rng).into_vec())
            .collect();
        let tm = mine_topics(&pts, 4, trial).unwrap();
        monotone &= tm.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    }

    let mut planted = Vec::new();
    let mut labels = Vec::new();
    for i in 0..80 {
        let centre = if i % 2 == 0 { 5.0 } else { -5.0 };
        let mut p = Tensor::<f64>::randn(&[4], 0.5, &mut rng).into_vec();
        p[0] += centre;
        planted.push(p);
        labels.push(i % 2);
    }
    let tm = mine_topics(&planted, 2, 3).unwrap();
    let agree = labels
        .iter()
        .zip(&tm.assignments)
        .filter(|(l, a)| l == a)
        .count();
    let recovered = agree.max(labels.len() - agree);

    let seed0 = &seeds[0];
    let topic = seed0.get(StrategyTag::PromptDsi(PromptStrategy::Topic));
    let pool = topic.model.pool.as_ref().unwrap();
    let keys_ok = pool.entries().iter().enumerate().all(|(i, e)| {
        let n = e.key.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        (n - 1.0).abs() < KEY_NORM_TOL
            && e.key_frozen
            && topic.frozen_baseline.contains_key(&format!("pool.{i}.key"))
    });

    let mut wins = 0;
    let mut util = Vec::new();
    for s in seeds {
        let t = s.utilization(StrategyTag::PromptDsi(PromptStrategy::Topic));
        let l = s.utilization(StrategyTag::PromptDsi(PromptStrategy::L2p));
        wins += (t > l) as usize;
        util.push(format!("{t} vs {l}"));
    }
    let pass = monotone && recovered == labels.len() && keys_ok && wins >= REQUIRED_SEEDS;
    outcome(
        pass,
        format!(
            "k-means monotone: {monotone}; planted recovery {recovered}/{}; {} TOPIC keys unit-norm and frozen: {keys_ok}; prompts above 1/M, TOPIC vs L2P per seed [{}] ({wins}/3)",
            labels.len(),
            pool.len(),
            util.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default().with_seed(11);
    cfg.plan.strategy = StrategyTag::PromptDsi(PromptStrategy::Topic);
    cfg.plan.base_epochs = 2;
    let mut files = Vec::new();
    for run in ["first", "second"] {
        let mut c = cfg.clone();
        c.out_dir = Some(dir.path().join(run));
        let store = c.store().unwrap();
        let base = train_base(&c, &store, None).unwrap();
        let out = continue_run(&c, &store, &base, &c.run_dir()).unwrap();
        files.push(std::fs::read(out.dir.join(PERF_CSV)).unwrap());
    }
    outcome(
        files[0] == files[1] && !files[0].is_empty(),
        format!(
            "two executions of config {} wrote {} and {} byte perf matrices, identical: {}",
            cfg.hash(),
            files[0].len(),
            files[1].len(),
            files[0] == files[1]
        ),
    )
}

fn guarded(f: &dyn Fn() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    })
}

fn report(n: usize, name: &str, o: &Outcome) {
    println!(
        "criterion {n:>2} [PRIMARY] {name}: {} ({})",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters: the suite is a single unit
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    // PROMPTDSI_ACCEPTANCE=1,2 restricts the run to the listed criteria
    let only: Option<Vec<usize>> = std::env::var("PROMPTDSI_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results = Vec::new();
    let mut record = |n: usize, name: &str, o: &dyn Fn() -> Outcome| {
        if wanted(n) {
            let o = guarded(o);
            report(n, name, &o);
            results.push(o.pass);
        }
    };

    record(1, "gradient suite", &criterion_gradients);
    record(2, "top-N selection oracle", &criterion_select_oracle);

    let needs_runs = [3, 4, 6, 7, 9].into_iter().any(wanted);
    let seeds: Option<Vec<SeedRuns>> = if needs_runs {
        catch_unwind(|| SEEDS.iter().map(|&s| run_seed(s)).collect()).ok()
    } else {
        None
    };
    let with_runs = |f: &dyn Fn(&[SeedRuns]) -> Outcome| -> Outcome {
        match &seeds {
            Some(s) => f(s),
            None => outcome(false, "benchmark runs failed"),
        }
    };

    record(3, "freeze audits", &|| with_runs(&|s| criterion_freeze_audit(&s[0])));
    record(4, "old-docid invariance", &|| with_runs(&|s| criterion_old_docids(&s[0])));
    record(5, "memory and parameter arithmetic", &criterion_arithmetic);
    record(6, "single- vs two-pass", &|| with_runs(&criterion_single_pass));
    record(7, "strategy ordering", &|| with_runs(&criterion_ordering));
    record(8, "continual-metric oracle", &criterion_cl_oracle);
    record(9, "topic pipeline", &|| with_runs(&criterion_topics));
    record(10, "determinism", &criterion_determinism);

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
