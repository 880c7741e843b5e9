pub mod container;
pub mod continuous;
pub mod diagnostics;
pub mod discrete;
pub mod envs;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod nets;
pub mod quantizer;
pub mod seed;

pub use error::{Result, SaqError};
pub use metrics::MetricTrace;
