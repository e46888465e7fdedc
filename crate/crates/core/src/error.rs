use alloc::string::String;

use thiserror::Error;

/// Errors produced by the core model, data and metric routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{dimension} capacity exceeded: index {index} does not fit capacity {capacity}")]
    Capacity {
        dimension: &'static str,
        index: usize,
        capacity: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("attention introspection disabled: slices were not retained")]
    IntrospectionDisabled,
    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: u64, batch: usize },
    #[error("gradient check failed for {group}: relative error {error:e}")]
    GradientCheck { group: String, error: f64 },
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
