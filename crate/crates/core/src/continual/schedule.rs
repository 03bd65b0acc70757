use std::collections::BTreeMap;

use super::store::{
    doc_centroids, rehearsal_violations, Access, CentroidCache, DataStore, Phase, ReplayBuffer,
};
use super::strategy::{StrategyTag, TimestepPlan};
use super::trainer::{
    continual_index_step, evaluate_queries, selection_embedding, train_initial, verify_frozen,
    BaseState, StepContext, TrainReport,
};
use crate::data::Split;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{PerfMatrices, RetrievalMetrics};
use crate::numerics::Real;
use crate::prompts::{PromptStrategy, SelectionRecord};
use crate::retrieval::Model;
use crate::rng;
use crate::topics::{ctfidf_terms, mine_topics, topic_keys, TopicModel};

/// Terms kept per topic for inspection.
const TOPIC_TERMS: usize = 10;

/// Per-timestep state handed to a schedule observer.
#[derive(Debug)]
pub struct TimestepOutcome<'a, F> {
    pub t: usize,
    pub model: &'a Model<F>,
    /// Metrics on `Q_0..Q_t`.
    pub row: &'a [RetrievalMetrics],
    pub report: &'a TrainReport,
    pub selections: &'a [SelectionRecord],
}

#[derive(Debug, Clone)]
pub struct ScheduleResult<F> {
    pub strategy: StrategyTag,
    pub perf: PerfMatrices,
    pub rows: Vec<Vec<RetrievalMetrics>>,
    pub reports: Vec<TrainReport>,
    /// Test-query selections after each timestep.
    pub selection_logs: Vec<Vec<SelectionRecord>>,
    pub topic_model: Option<TopicModel>,
    /// First recorded digest of every tensor that was ever frozen.
    pub frozen_baseline: BTreeMap<String, String>,
    pub centroid_columns: usize,
    pub model: Model<F>,
}

/// Clusters `D_0` documents by the mean selection embedding of their
/// training queries and labels each cluster with its c-TF-IDF terms.
pub fn mine_corpus_topics<F: Real>(
    model: &Model<F>,
    store: &DataStore,
    plan: &TimestepPlan,
    seed: u64,
) -> Result<TopicModel> {
    let docs = store.docs(Phase::Train(0), 0)?;
    let queries = store.queries(Phase::Train(0), 0, Split::Train)?;
    let mode = plan.strategy.selection_mode();
    let dim = model.dim();
    let mut sums = vec![vec![0.0f64; dim]; docs.len()];
    let mut counts = vec![0usize; docs.len()];
    let slot: BTreeMap<&str, usize> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| (d.doc_id.as_str(), i))
        .collect();
    for q in &queries {
        let Some(&i) = slot.get(q.doc_id.as_str()) else {
            continue;
        };
        let e = selection_embedding(model, &q.encoded(), mode)?;
        for (s, v) in sums[i].iter_mut().zip(&e) {
            *s += v.f64();
        }
        counts[i] += 1;
    }
    let mut embs = Vec::new();
    let mut tokens = Vec::new();
    for ((s, c), d) in sums.into_iter().zip(counts).zip(&docs) {
        if c > 0 {
            embs.push(s.into_iter().map(|v| v / c as f64).collect::<Vec<f64>>());
            tokens.push(d.tokens.clone());
        }
    }
    if embs.is_empty() {
        return Err(Error::Data("no D_0 training queries to mine topics from".into()));
    }
    let mut tm = mine_topics(&embs, plan.num_topics, rng::derive_seed(seed, "kmeans"))?;
    let terms = ctfidf_terms(&tm.assignments, &tokens, tm.num_topics(), TOPIC_TERMS);
    for (topic, t) in tm.topics.iter_mut().zip(terms) {
        topic.top_terms = t;
    }
    Ok(tm)
}

pub fn evaluate_row<F: Real>(
    model: &Model<F>,
    store: &DataStore,
    t: usize,
    plan: &TimestepPlan,
) -> Result<(Vec<RetrievalMetrics>, Vec<SelectionRecord>)> {
    let mut row = Vec::with_capacity(t + 1);
    let mut log = Vec::new();
    for i in 0..=t {
        let q = store.queries(Phase::Eval, i, Split::Test)?;
        let (m, l) = evaluate_queries(model, &q, plan.exec)?;
        row.push(m);
        log.extend(l);
    }
    Ok((row, log))
}

/// Runs `t = 1..T` from a trained base, evaluating every test set seen so
/// far after each step. `observer` sees each timestep (including `t = 0`)
/// as soon as it is evaluated; an error from it aborts the schedule.
pub fn run_schedule<F: Real>(
    store: &DataStore,
    plan: &TimestepPlan,
    base: &BaseState<F>,
    seed: u64,
    observer: &mut dyn FnMut(&TimestepOutcome<'_, F>) -> Result<()>,
) -> Result<ScheduleResult<F>> {
    plan.validate()?;
    if store.num_corpora() < 2 {
        return Err(Error::Config(
            "a schedule needs D_0 and at least one new corpus".into(),
        ));
    }
    let tag = plan.strategy;
    let mut model = base.model.clone();
    let mut base_report = base.report.clone();
    base_report.strategy = tag;

    let (row0, log0) = evaluate_row(&model, store, 0, plan)?;
    let mut perf = PerfMatrices::default();
    perf.push_row(&row0)?;
    observer(&TimestepOutcome {
        t: 0,
        model: &model,
        row: &row0,
        report: &base_report,
        selections: &log0,
    })?;

    let mut replay = ReplayBuffer::new();
    let mut cache = CentroidCache::<F>::new(model.dim());
    let mut topic_model = None;
    if tag == StrategyTag::ReplayFt {
        let q = store.queries(Phase::Train(0), 0, Split::Train)?;
        replay.add_corpus(&model, &q)?;
    }
    if tag == StrategyTag::CachedCentroid {
        let q = store.queries(Phase::Train(0), 0, Split::Train)?;
        let n0 = model.registry.segment(0).map_or(0, |s| s.len());
        cache.append(&doc_centroids(&model, 0..n0, &q)?)?;
    }
    if tag.prompt_strategy() == Some(PromptStrategy::Topic) {
        topic_model = Some(mine_corpus_topics(&model, store, plan, seed)?);
    }
    let keys = topic_model.as_ref().map(topic_keys::<F>);

    let mut rows = vec![row0];
    let mut logs = vec![log0];
    let mut reports = vec![base_report];
    let mut frozen_baseline: BTreeMap<String, String> = BTreeMap::new();
    for t in 1..store.num_corpora() {
        let log_start = store.accesses().len();
        let reads_before = cache.reads();
        let mut ctx = StepContext {
            store,
            plan,
            base: &base.model,
            replay: &mut replay,
            cache: &mut cache,
            topic_keys: keys.as_ref(),
            seed,
        };
        let (next, report) = continual_index_step(model, t, &mut ctx)?;
        model = next;
        for (k, v) in &report.frozen_at_start {
            frozen_baseline.entry(k.clone()).or_insert_with(|| v.clone());
        }
        if tag.rehearsal_free() {
            let step_reads: Vec<Access> = store.accesses()[log_start..].to_vec();
            let bad = rehearsal_violations(&step_reads, t);
            if let Some(a) = bad.first() {
                return Err(Error::Rehearsal(format!(
                    "step {t} read corpus {} ({:?})",
                    a.corpus, a.split
                )));
            }
            if cache.reads() != reads_before {
                return Err(Error::Rehearsal(format!(
                    "step {t} read the centroid cache"
                )));
            }
        }
        let (row, log) = evaluate_row(&model, store, t, plan)?;
        perf.push_row(&row)?;
        observer(&TimestepOutcome {
            t,
            model: &model,
            row: &row,
            report: &report,
            selections: &log,
        })?;
        rows.push(row);
        logs.push(log);
        reports.push(report);
    }
    verify_frozen(&model, &frozen_baseline)?;
    Ok(ScheduleResult {
        strategy: tag,
        perf,
        rows,
        reports,
        selection_logs: logs,
        topic_model,
        frozen_baseline,
        centroid_columns: cache.columns(),
        model,
    })
}

/// Base training followed by the continual schedule.
pub fn run_full<F: Real>(
    store: &DataStore,
    plan: &TimestepPlan,
    enc: &EncoderConfig,
    seed: u64,
    observer: &mut dyn FnMut(&TimestepOutcome<'_, F>) -> Result<()>,
) -> Result<ScheduleResult<F>> {
    let base = train_initial(store, plan, enc, seed)?;
    run_schedule(store, plan, &base, seed, observer)
}
