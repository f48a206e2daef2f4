// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

/// Errors raised anywhere in the laboratory core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary error: unknown symbol {0:?}")]
    Vocabulary(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("KL divergence undefined: q[{index}] = 0 while p[{index}] > 0")]
    DivergenceUndefined { index: usize },

    #[error("singular key: (C^-1 k)^T k = {0:e}")]
    SingularKey(f64),

    #[error("subject span not found: {0}")]
    Span(String),

    #[error("world generation failed: {0}")]
    Generation(String),

    #[error("edit sampling failed: {0}")]
    Sampling(String),

    #[error("suite construction failed: {0}")]
    Suite(String),

    #[error("augmentation failed: {0}")]
    Augmentation(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("invalid eval case: {0}")]
    InvalidCase(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
