//! Dense tensors, kernels, losses, the AdamW step and the gradient checker.

mod gradcheck;
mod loss;
pub mod ops;
mod optim;
mod real;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckConfig, GradCheckReport};
pub use loss::{
    cosine_distance, cosine_similarity, cosine_with_grad, cross_entropy_logits, cross_entropy_row,
    CosineGrad,
};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use real::Real;
pub use tensor::Tensor;
