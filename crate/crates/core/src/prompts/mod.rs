//! Key–prompt pool: top-N matching, matching loss, CODA composition,
//! per-strategy allocation and utilization statistics.

mod allocate;
mod pool;
mod select;
mod utilization;

pub use allocate::{allocate_for_timestep, FreezePlan, PoolConfig};
pub use pool::{PromptEntry, PromptPool, PromptStrategy, Provenance};
pub use select::{
    coda_backward, coda_compose, match_loss_grad, select_topn, CodaComposition, CodaEntryGrad,
    MatchGrad, SelectionResult,
};
pub use utilization::{utilization_stats, write_selection_log, SelectionRecord, UtilizationTable};
