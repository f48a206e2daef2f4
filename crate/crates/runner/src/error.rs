// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::path::{Path, PathBuf};

/// Pipeline stage an error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenWorld,
    Corpus,
    Pretrain,
    Covariance,
    Edit,
    Eval,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::GenWorld => "gen-world",
            Stage::Corpus => "render-corpus",
            Stage::Pretrain => "pretrain",
            Stage::Covariance => "covariance",
            Stage::Edit => "edit",
            Stage::Eval => "eval",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("[{stage}] {context}: {source}")]
    Stage {
        stage: Stage,
        context: String,
        #[source]
        source: editlab_core::Error,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("[report] {0}")]
    Schema(String),
    #[error("base checkpoint changed before arm {arm}: {expected:016x} != {found:016x}")]
    BaseChanged { arm: String, expected: u64, found: u64 },
    #[error("arms failed: {}", .0.join(", "))]
    ArmsFailed(Vec<String>),
}

impl RunError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        RunError::Io { path: path.to_path_buf(), source }
    }

    pub fn stage(stage: Stage, context: impl Into<String>) -> impl FnOnce(editlab_core::Error) -> Self {
        let context = context.into();
        move |source| RunError::Stage { stage, context, source }
    }
}

pub type RunResult<T> = std::result::Result<T, RunError>;
