use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::store::{doc_centroids, to_examples, CentroidCache, DataStore, Phase, ReplayBuffer};
use super::strategy::{StrategyTag, TimestepPlan};
use crate::data::{QueryRecord, Split};
use crate::encoder::{EncoderConfig, SelectionMode};
use crate::error::{Error, Result};
use crate::eval::RetrievalMetrics;
use crate::numerics::{AdamWConfig, OptimizerState, Real, Tensor};
use crate::par::{self, Exec};
use crate::prompts::{allocate_for_timestep, PromptStrategy, SelectionRecord};
use crate::retrieval::{apply_grads, dsi_loss, rank_scores, LossConfig, Model, Routing, TrainExample};
use crate::rng::{self, Rng};

/// Ranked-list depth used for every metric.
pub const EVAL_DEPTH: usize = 10;

/// What happened during one timestep's training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub t: usize,
    pub strategy: StrategyTag,
    pub epochs: usize,
    pub examples: usize,
    pub steps: usize,
    pub replay_batches: usize,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Encoder block invocations during the step (training and its
    /// pre-training evaluation).
    pub layer_invocations: u64,
    pub wall_seconds: f64,
    /// Optimizer steps followed by a frozen-tensor digest check.
    pub audited_steps: usize,
    /// Metrics on the new corpus's test queries before training.
    pub pre_train: Option<RetrievalMetrics>,
    /// Metrics on the new corpus's validation queries after training.
    pub val: Option<RetrievalMetrics>,
    /// Trainable scalars this step: classifier rows plus unfrozen pool
    /// tensors (or the whole encoder when it trains).
    pub trainable_scalars: usize,
    /// Digests of every frozen tensor right before training started.
    pub frozen_at_start: BTreeMap<String, String>,
}

/// Fails if any tensor in `expected` no longer has its recorded digest.
pub fn verify_frozen<F: Real>(model: &Model<F>, expected: &BTreeMap<String, String>) -> Result<()> {
    let now = model.frozen_digests();
    for (name, digest) in expected {
        let current = match now.get(name) {
            Some(d) => d.clone(),
            None if name == "encoder" => model.encoder.digest(),
            None => return Err(Error::FreezeViolation(format!("{name} was unfrozen"))),
        };
        if &current != digest {
            return Err(Error::FreezeViolation(name.clone()));
        }
    }
    Ok(())
}

pub(crate) struct LoopSpec<'a> {
    pub examples: &'a [TrainExample],
    pub replay: Option<(&'a ReplayBuffer, usize)>,
    pub loss: LossConfig,
    pub adam: AdamWConfig,
    /// Per-prefix learning-rate overrides.
    pub group_lr: Vec<(String, f64)>,
    pub epochs: usize,
    pub batch_size: usize,
    pub audit: bool,
}

#[derive(Debug, Default)]
pub(crate) struct LoopStats {
    pub steps: usize,
    pub replay_batches: usize,
    pub epoch_loss: Vec<f64>,
    pub audited_steps: usize,
}

fn step<F: Real>(
    model: &mut Model<F>,
    batch: &[TrainExample],
    loss: &LossConfig,
    opt: &mut OptimizerState<F>,
    snapshot: Option<&BTreeMap<String, String>>,
    stats: &mut LoopStats,
) -> Result<f64> {
    let (value, grads) = dsi_loss(model, batch, loss)?;
    apply_grads(model, &grads, opt)?;
    stats.steps += 1;
    if let Some(s) = snapshot {
        verify_frozen(model, s)?;
        stats.audited_steps += 1;
    }
    Ok(value.total)
}

pub(crate) fn train_loop<F: Real>(
    model: &mut Model<F>,
    spec: &LoopSpec,
    rng: &mut Rng,
) -> Result<LoopStats> {
    let mut stats = LoopStats::default();
    if spec.examples.is_empty() || spec.epochs == 0 {
        return Ok(stats);
    }
    let snapshot = spec.audit.then(|| model.frozen_digests());
    let mut opt = OptimizerState::new(spec.adam);
    for (prefix, lr) in &spec.group_lr {
        opt.set_group_lr(prefix, *lr);
    }
    let mut order: Vec<usize> = (0..spec.examples.len()).collect();
    let mut since_replay = 0usize;
    for _ in 0..spec.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(spec.batch_size) {
            let batch: Vec<TrainExample> = idx.iter().map(|&i| spec.examples[i].clone()).collect();
            total += step(model, &batch, &spec.loss, &mut opt, snapshot.as_ref(), &mut stats)?;
            batches += 1;
            since_replay += 1;
            if let Some((buffer, every)) = spec.replay {
                if since_replay >= every && !buffer.is_empty() {
                    since_replay = 0;
                    let rb = buffer.sample(spec.batch_size, rng);
                    step(model, &rb, &spec.loss, &mut opt, snapshot.as_ref(), &mut stats)?;
                    stats.replay_batches += 1;
                }
            }
        }
        stats.epoch_loss.push(total / batches as f64);
    }
    Ok(stats)
}

/// Metrics and selection log for a set of queries under the current model.
pub fn evaluate_queries<F: Real>(
    model: &Model<F>,
    queries: &[QueryRecord],
    exec: Exec,
) -> Result<(RetrievalMetrics, Vec<SelectionRecord>)> {
    let k = EVAL_DEPTH.min(model.classifier.num_docs());
    let per_query = par::map(exec, queries, |q| -> Result<(Vec<usize>, usize, Option<SelectionRecord>)> {
        let gold = model.registry.docid(&q.doc_id)?;
        let enc = model.encode(&q.encoded(), &Routing::Select)?;
        let ranked = rank_scores(&model.classifier.scores(enc.h_q()), k)?;
        let top_n = model.pool.as_ref().map_or(1, |p| p.top_n);
        let rec = enc.selection.map(|s| {
            let (prompt_ids, distances) = s.logged(top_n);
            SelectionRecord {
                corpus: q.corpus,
                query_id: q.query_id.clone(),
                prompt_ids,
                distances,
            }
        });
        Ok((ranked.docids().collect(), gold, rec))
    });
    let mut rankings = Vec::with_capacity(queries.len());
    let mut log = Vec::new();
    for r in per_query {
        let (ranked, gold, rec) = r?;
        rankings.push((ranked, gold));
        log.extend(rec);
    }
    let metrics = RetrievalMetrics::from_rankings(rankings.iter().map(|(r, g)| (r.as_slice(), *g)));
    Ok((metrics, log))
}

/// The model after base training on `D_0`.
#[derive(Debug, Clone)]
pub struct BaseState<F> {
    pub model: Model<F>,
    pub report: TrainReport,
}

pub fn check_fits(store: &DataStore, enc: &EncoderConfig) -> Result<()> {
    let tl = store.timeline();
    if tl.max_token() as usize >= enc.vocab_size {
        return Err(Error::Config(format!(
            "token id {} exceeds the encoder vocabulary {}",
            tl.max_token(),
            enc.vocab_size
        )));
    }
    if tl.max_query_len() + 1 > enc.max_len {
        return Err(Error::Config(format!(
            "queries of {} tokens plus [CLS] exceed max_len {}",
            tl.max_query_len(),
            enc.max_len
        )));
    }
    Ok(())
}

fn adam(plan: &TimestepPlan, lr: f64) -> AdamWConfig {
    AdamWConfig {
        lr,
        weight_decay: plan.weight_decay,
        ..AdamWConfig::default()
    }
}

/// Full-model cross-entropy training on `D_0`.
pub fn train_initial<F: Real>(
    store: &DataStore,
    plan: &TimestepPlan,
    enc: &EncoderConfig,
    seed: u64,
) -> Result<BaseState<F>> {
    plan.validate()?;
    enc.validate()?;
    check_fits(store, enc)?;
    let started = Instant::now();
    let mut model = Model::<F>::new(enc.clone(), &mut rng::stream(seed, "init"))?;
    let docs = store.doc_ids(Phase::Train(0), 0)?;
    let rows = model.index_corpus(&docs, &mut rng::stream(seed, "expand/0"))?;
    let train = store.queries(Phase::Train(0), 0, Split::Train)?;
    let examples = to_examples(&model, &train)?;
    model.encoder.reset_counter();
    let spec = LoopSpec {
        examples: &examples,
        replay: None,
        loss: LossConfig {
            train_encoder: true,
            classifier_rows: rows,
            exec: plan.exec,
            ..LossConfig::default()
        },
        adam: adam(plan, plan.base_lr),
        group_lr: Vec::new(),
        epochs: plan.base_epochs,
        batch_size: plan.batch_size,
        audit: false,
    };
    let stats = train_loop(&mut model, &spec, &mut rng::stream(seed, "shuffle/0"))?;
    let invocations = model.encoder.layer_invocations();
    let val_q = store.queries(Phase::Train(0), 0, Split::Val)?;
    let val = if val_q.is_empty() {
        None
    } else {
        Some(evaluate_queries(&model, &val_q, plan.exec)?.0)
    };
    let report = TrainReport {
        t: 0,
        strategy: plan.strategy,
        epochs: plan.base_epochs,
        examples: examples.len(),
        steps: stats.steps,
        replay_batches: 0,
        epoch_loss: stats.epoch_loss,
        layer_invocations: invocations,
        wall_seconds: started.elapsed().as_secs_f64(),
        audited_steps: 0,
        pre_train: None,
        val,
        trainable_scalars: model.encoder.params.num_scalars() + model.classifier.weights().len(),
        frozen_at_start: BTreeMap::new(),
    };
    Ok(BaseState { model, report })
}

/// Embedding used to match a query against prompt keys under `mode`.
pub fn selection_embedding<F: Real>(
    model: &Model<F>,
    tokens: &[u32],
    mode: SelectionMode,
) -> Result<Vec<F>> {
    match mode {
        SelectionMode::SinglePassAvg => {
            let l = model.encoder.config.first_prompt_layer();
            model.encoder.avg_at_layer(tokens, l)
        }
        SelectionMode::TwoPassCls => Ok(model.encoder.forward(tokens, None)?.h_q().to_vec()),
    }
}

/// Cross-step state a strategy carries between timesteps.
#[derive(Debug)]
pub struct StepContext<'a, F> {
    pub store: &'a DataStore,
    pub plan: &'a TimestepPlan,
    /// The model after `D_0`, the starting point of retrain-from-base modes.
    pub base: &'a Model<F>,
    pub replay: &'a mut ReplayBuffer,
    pub cache: &'a mut CentroidCache<F>,
    pub topic_keys: Option<&'a Tensor<F>>,
    pub seed: u64,
}

/// Indexes `D_t` into `model` under the plan's strategy.
pub fn continual_index_step<F: Real>(
    model: Model<F>,
    t: usize,
    ctx: &mut StepContext<'_, F>,
) -> Result<(Model<F>, TrainReport)> {
    if t == 0 {
        return Err(Error::Contract("continual steps start at t = 1".into()));
    }
    let plan = ctx.plan;
    let tag = plan.strategy;
    let store = ctx.store;
    let phase = Phase::Train(t);
    let started = Instant::now();

    let mut model = match tag {
        StrategyTag::Multi => {
            let mut m = ctx.base.clone();
            for i in 1..t {
                let ids = store.doc_ids(phase, i)?;
                m.index_corpus(&ids, &mut rng::stream(ctx.seed, &format!("expand/{i}")))?;
            }
            m
        }
        _ => model,
    };
    model.encoder.reset_counter();
    let ids = store.doc_ids(phase, t)?;
    let new_rows = model.index_corpus(&ids, &mut rng::stream(ctx.seed, &format!("expand/{t}")))?;

    if tag.freezes_encoder() {
        model.encoder.frozen = true;
        model.classifier.freeze_all();
        let last = model.classifier.segments().len() - 1;
        model.classifier.set_frozen(last, false);
    } else {
        model.encoder.frozen = false;
        model.classifier.unfreeze_all();
    }

    let mut routing = Routing::Select;
    if let Some(ps) = tag.prompt_strategy() {
        model.encoder.config.selection = tag.selection_mode();
        let layers = model.encoder.config.prompt_layers.clone();
        let (pool, fp) = allocate_for_timestep(
            model.pool.take(),
            ps,
            &plan.pool,
            &layers,
            model.dim(),
            t,
            ctx.topic_keys,
            &mut rng::stream(ctx.seed, &format!("pool/{t}")),
        )?;
        model.pool = Some(pool);
        if let Some(route) = fp.train_route {
            routing = Routing::Force(route);
        }
    }

    let train_t = store.queries(phase, t, Split::Train)?;
    if tag == StrategyTag::CachedCentroid {
        let c = doc_centroids(&model, new_rows.clone(), &train_t)?;
        let dim = model.dim();
        let dst = model.classifier.rows_mut(new_rows.clone());
        for (i, row) in c.iter().enumerate() {
            dst[i * dim..(i + 1) * dim].copy_from_slice(row);
        }
        ctx.cache.append(&c)?;
    }

    let test_t = store.queries(Phase::Eval, t, Split::Test)?;
    let pre_train = if test_t.is_empty() {
        None
    } else {
        Some(evaluate_queries(&model, &test_t, plan.exec)?.0)
    };

    let train_queries: Vec<QueryRecord> = match tag {
        StrategyTag::Multi => {
            let mut all = Vec::new();
            for i in 1..=t {
                all.extend(store.queries(phase, i, Split::Train)?);
            }
            all
        }
        StrategyTag::Joint => {
            let mut all = Vec::new();
            for i in 0..=t {
                all.extend(store.queries(phase, i, Split::Train)?);
            }
            all
        }
        _ => train_t.clone(),
    };
    let examples = to_examples(&model, &train_queries)?;
    let train_encoder = !model.encoder.frozen;
    let classifier_rows = if train_encoder {
        0..model.classifier.num_docs()
    } else {
        model.classifier.trainable_rows()?
    };
    let loss = LossConfig {
        train_encoder,
        classifier_rows: classifier_rows.clone(),
        use_match: tag.prompt_strategy().is_some_and(|p| p.uses_match_loss()),
        match_weight: plan.match_weight,
        routing,
        exec: plan.exec,
        ..LossConfig::default()
    };
    let trainable_scalars = classifier_rows.len() * model.dim()
        + if train_encoder {
            model.encoder.params.num_scalars()
        } else {
            model.pool.as_ref().map_or(0, |p| p.trainable_scalars())
        };
    let frozen_at_start = model.frozen_digests();
    let epochs = plan.step_epochs();
    let spec = LoopSpec {
        examples: &examples,
        replay: (tag == StrategyTag::ReplayFt).then_some((&*ctx.replay, plan.replay_every)),
        loss,
        adam: adam(plan, plan.step_lr()),
        group_lr: if tag.is_prompt_based() {
            vec![("classifier.".to_string(), plan.head_lr)]
        } else {
            Vec::new()
        },
        epochs,
        batch_size: plan.batch_size,
        audit: plan.audit,
    };
    let stats = train_loop(
        &mut model,
        &spec,
        &mut rng::stream(ctx.seed, &format!("shuffle/{t}")),
    )?;
    let layer_invocations = model.encoder.layer_invocations();

    if tag == StrategyTag::ReplayFt {
        ctx.replay.add_corpus(&model, &train_t)?;
    }
    if tag.prompt_strategy() == Some(PromptStrategy::Topic) && plan.pool.freeze_topic_prompts {
        freeze_routed_topics(&mut model, &examples)?;
    }

    let val_q = store.queries(phase, t, Split::Val)?;
    let val = if val_q.is_empty() {
        None
    } else {
        Some(evaluate_queries(&model, &val_q, plan.exec)?.0)
    };
    let report = TrainReport {
        t,
        strategy: tag,
        epochs,
        examples: examples.len(),
        steps: stats.steps,
        replay_batches: stats.replay_batches,
        epoch_loss: stats.epoch_loss,
        layer_invocations,
        wall_seconds: started.elapsed().as_secs_f64(),
        audited_steps: stats.audited_steps,
        pre_train,
        val,
        trainable_scalars,
        frozen_at_start,
    };
    Ok((model, report))
}

/// Freezes every topic prompt that one of `examples` is routed to.
fn freeze_routed_topics<F: Real>(model: &mut Model<F>, examples: &[TrainExample]) -> Result<()> {
    let mut used = std::collections::BTreeSet::new();
    for ex in examples {
        if let Some(crate::retrieval::Selection::TopN(s)) =
            model.encode(&ex.tokens, &Routing::Select)?.selection
        {
            used.extend(s.ids);
        }
    }
    if let Some(pool) = model.pool.as_mut() {
        for id in used {
            pool.entry_mut(id).prompt_frozen = true;
        }
    }
    Ok(())
}
