// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tinylm::{ModelConfig, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ft,
    #[serde(rename = "ft_l")]
    FtL,
    Rome,
    Multilayer,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ft => "FT",
            Method::FtL => "FT-L",
            Method::Rome => "ROME",
            Method::Multilayer => "MULTILAYER",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditPlan {
    pub method: Method,
    /// Edited layers, ascending. Empty selects the model's default edit layer.
    pub layers: Vec<usize>,
    /// Fine-tuning learning rate (Adam).
    pub lr: f64,
    pub steps: usize,
    /// Fine-tuning stops once the mean loss drops below this.
    pub loss_threshold: f64,
    /// L∞ bound on the weight change for FT-L.
    pub epsilon: f64,
    /// Adam on the value delta `h`.
    pub v_lr: f64,
    pub v_steps: usize,
    /// Early stop once the target probability exceeds this.
    pub v_target_prob: f64,
    /// `‖h‖ ≤ clamp_norm_factor · ‖v‖`.
    pub clamp_norm_factor: f64,
    /// Optimize `h` through the change the closed-form update makes at every
    /// position of the optimization prompts, not only at the subject.
    /// Applies to single-layer edits.
    pub footprint: bool,
    /// Number of prefixes `N`; the first is always empty.
    pub n_prefixes: usize,
    /// Sampled tokens per prefix.
    pub prefix_len: usize,
    /// Covariance ridge as a fraction of `trace(C)/d`.
    pub cov_ridge: f64,
    pub cov_positions: usize,
    pub seed: u64,
}

impl Default for EditPlan {
    fn default() -> Self {
        Self {
            method: Method::Rome,
            layers: Vec::new(),
            lr: 1e-3,
            steps: 25,
            loss_threshold: 1e-2,
            epsilon: 5e-4,
            v_lr: 1.0,
            v_steps: 100,
            v_target_prob: 0.95,
            clamp_norm_factor: 4.0,
            footprint: true,
            n_prefixes: 5,
            prefix_len: 4,
            cov_ridge: 1e-4,
            cov_positions: 10_000,
            seed: 0,
        }
    }
}

impl EditPlan {
    pub fn for_method(method: Method) -> Self {
        Self { method, ..Default::default() }
    }

    /// Target layers after applying the default.
    pub fn target_layers(&self, cfg: &ModelConfig) -> Vec<usize> {
        if self.layers.is_empty() {
            vec![cfg.default_edit_layer()]
        } else {
            self.layers.clone()
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let layers = self.target_layers(cfg);
        if let Some(&l) = layers.iter().find(|&&l| l >= cfg.n_layers) {
            return Err(Error::Config(format!("edit layer {l} outside model of {} layers", cfg.n_layers)));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("edit layers must be strictly ascending".into()));
        }
        if self.method == Method::Rome && layers.len() != 1 {
            return Err(Error::Config("ROME edits exactly one layer".into()));
        }
        if self.method == Method::FtL && !(self.epsilon > 0.0) {
            return Err(Error::Config("FT-L needs epsilon > 0".into()));
        }
        if self.n_prefixes == 0 {
            return Err(Error::Config("n_prefixes must be at least 1".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("v_lr", self.v_lr),
            ("clamp_norm_factor", self.clamp_norm_factor),
            ("cov_ridge", self.cov_ridge),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Change of one edited tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: usize,
    pub tensor: String,
    pub frobenius: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_src: f64,
    pub l_odc: f64,
    pub l_n: f64,
}

/// One optimization step. For value optimization `edit` names the request
/// being optimized; fine-tuning steps cover the whole batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit: Option<usize>,
    pub step: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<LossTerms>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_abs_dev: Option<f64>,
    /// `‖h‖ / ‖v‖` before the step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_ratio: Option<f64>,
}

/// Provenance of an edit, without the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub method: Method,
    pub objective: String,
    pub layers: Vec<usize>,
    pub edit_ids: Vec<usize>,
    pub plan: EditPlan,
    pub layer_deltas: Vec<LayerDelta>,
    pub trace: Vec<TraceStep>,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct EditOutcome<T> {
    pub model: ModelState<T>,
    pub record: EditRecord,
}

pub(crate) fn tensor_delta<T: Scalar>(layer: usize, tensor: &str, before: &[T], after: &[T]) -> LayerDelta {
    let mut fro = 0.0;
    let mut max_abs: f64 = 0.0;
    for (a, b) in before.iter().zip(after) {
        let d = b.f64() - a.f64();
        fro += d * d;
        max_abs = max_abs.max(d.abs());
    }
    LayerDelta { layer, tensor: tensor.to_string(), frobenius: fro.sqrt(), max_abs }
}
