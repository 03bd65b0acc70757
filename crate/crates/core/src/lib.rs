//! Classification-based differentiable search index with rehearsal-free,
//! prompt-based continual indexing.

pub mod continual;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod par;
pub mod prompts;
pub mod retrieval;
pub mod rng;
pub mod run;
pub mod topics;

pub use error::{Error, Result};
