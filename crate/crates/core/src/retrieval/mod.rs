//! Classification head over atomic docids, the assembled retrieval model
//! and its training objectives.

mod classifier;
mod model;
mod objective;
mod registry;

pub use classifier::{rank_scores, score_and_rank, Classifier, RankedList, Segment, NEW_ROW_STD};
pub use model::{Encoded, Model, Routing, Selection};
pub use objective::{
    apply_grads, batch_loss, check_model_gradients, dsi_loss, EntryGrad, Grads, LossConfig,
    LossValue, TrainExample,
};
pub use registry::DocidRegistry;
