//! Memorization-removal difficulty and sample-aware unlearning on small
//! character-level language models.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod lm;
pub mod metrics;
pub mod mrd;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod unlearn;

pub use error::{Error, Result};
pub use exec::ExecMode;
