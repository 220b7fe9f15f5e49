//! Semantic clone detection through probabilistic models of runtime
//! behavior.
//!
//! Each executable's runtime observations are modeled by a Real-NVP
//! density. Two executables are compared by sampling from one model,
//! conditioning the other on the matched dimensions, and testing the
//! resulting log-likelihood ratios in both directions.

pub mod conditioning;
pub mod corpus;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod flow;
mod float_serde;
pub mod pipeline;
pub mod seed;
pub mod traces;

pub use error::{Error, Result};
pub use flow::{FlowArch, FlowModel, TrainConfig};
pub use traces::{ExecutableProfile, RawTraceEvent, TraceDataset};
