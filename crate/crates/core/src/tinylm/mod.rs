// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small pre-norm decoder-only transformer with a closed-vocabulary
//! tokenizer, a from-scratch trainer and capture/patch hooks on the MLPs.

pub mod checkpoint;
mod config;
mod forward;
mod model;
pub mod ops;
mod score;
mod tokenizer;
mod train;

pub use config::ModelConfig;
pub use forward::{forward, CapturePoint, ForwardTrace, Patch, Site};
pub use model::{build_model, tensor_shapes, LayerWeights, ModelState, Weights};
pub use score::{
    generate, generate_ids, next_token_distribution, score_continuations, sequence_logprob, AnswerScore,
    DecodeConfig,
};
pub use tokenizer::{join_symbols, normalize, split_symbols, TokenId, TokenSeq, Tokenizer};
pub use train::{mean_lm_loss, train, TrainConfig, TrainReport};

pub(crate) use forward::{GradOptions, Pass, SeqPatch, SiteGrad};
pub(crate) use train::Adam;
#[cfg(test)]
pub(crate) use train::cross_entropy;
