// SPDX-License-Identifier: MIT OR Apache-2.0

//! Core of a desk-scale laboratory for studying editing overfit in
//! knowledge editing.
//!
//! * [`tinylm`]: a small decoder-only transformer with capture/patch hooks.
//! * [`factworld`]: a synthetic fact world, its corpus, counterfactual edit
//!   requests and six-task probe suites.
//! * [`editors`]: FT, FT-L, rank-one and multi-layer editors.
//! * [`lti`]: the context-guided multi-stage inference constraints.
//! * [`evalsuite`]: DP / CAP / OAP / EOS / AMS scoring.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix the
//! two precisions used in practice.

pub mod editors;
pub mod error;
pub mod evalsuite;
pub mod factworld;
pub mod lti;
pub mod scalar;
pub mod tinylm;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision model, the precision checkpoints are stored in.
pub type Model = tinylm::ModelState<f32>;
/// Double-precision model, used for gradient checks.
pub type Model64 = tinylm::ModelState<f64>;
