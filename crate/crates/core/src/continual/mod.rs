//! Timestep orchestration: base training on `D_0`, per-corpus continual
//! indexing under each strategy's freeze policy, and evaluation of every
//! test set seen so far after each step.

mod schedule;
mod store;
mod strategy;
mod trainer;

pub use schedule::{
    evaluate_row, mine_corpus_topics, run_full, run_schedule, ScheduleResult, TimestepOutcome,
};
pub use store::{
    doc_centroids, rehearsal_violations, to_examples, Access, CentroidCache, DataStore, Phase,
    ReplayBuffer,
};
pub use strategy::{StrategyTag, TimestepPlan};
pub use trainer::{
    check_fits, continual_index_step, evaluate_queries, selection_embedding, train_initial, verify_frozen,
    BaseState, StepContext, TrainReport, EVAL_DEPTH,
};
