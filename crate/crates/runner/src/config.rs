// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration, read from a single TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use editlab_core::editors::{EditPlan, Method};
use editlab_core::factworld::{AugmentKind, CorpusConfig, SuiteConfig, WorldConfig};
use editlab_core::lti::LtiConfig;
use editlab_core::tinylm::{ModelConfig, TrainConfig};

use crate::error::{RunError, RunResult};

/// Name of the row holding the unedited model's scores.
pub const BASE_ARM: &str = "BASE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds of the edit samples; each seed draws its own `n_edits` edits.
    pub seeds: Vec<u64>,
    pub n_edits: usize,
    pub world_seed: u64,
    pub world: WorldConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub suite: SuiteConfig,
    pub arms: Vec<ArmConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            n_edits: 30,
            world_seed: 0,
            world: WorldConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            suite: SuiteConfig::default(),
            arms: Vec::new(),
            sweep: None,
        }
    }
}

/// One editing method with its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    #[serde(default)]
    pub plan: EditPlan,
    /// Adds the LTI constraints to the editor's objective.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lti: Option<LtiConfig>,
    /// Edits applied together to one model copy; 1 is the single-edit protocol.
    #[serde(default = "one")]
    pub batch_size: usize,
    /// Augmentation prompts added to each edit's optimization prompts.
    #[serde(default)]
    pub augment: usize,
    #[serde(default = "paraphrase")]
    pub augment_kind: AugmentKind,
}

fn one() -> usize {
    1
}

fn paraphrase() -> AugmentKind {
    AugmentKind::Paraphrase
}

impl ArmConfig {
    pub fn new(name: &str, plan: EditPlan) -> Self {
        Self { name: name.into(), plan, lti: None, batch_size: 1, augment: 0, augment_kind: AugmentKind::Paraphrase }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    None,
    Epsilon,
    BatchSize,
    NLayers,
    Augmentation,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::None => "none",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::NLayers => "n_layers",
            SweepAxis::Augmentation => "augmentation",
        }
    }

    fn is_count(self) -> bool {
        matches!(self, SweepAxis::BatchSize | SweepAxis::NLayers | SweepAxis::Augmentation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    #[serde(default)]
    pub values: Vec<f64>,
    /// Arms the sweep applies to; empty means every arm.
    #[serde(default)]
    pub arms: Vec<String>,
}

/// An arm with one sweep value applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmVariant {
    pub arm: ArmConfig,
    pub axis: Option<SweepAxis>,
    pub value: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> RunResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> RunResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> RunResult<String> {
        toml::to_string(self).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn validate(&self) -> RunResult<()> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.n_edits == 0 {
            return bad("n_edits must be at least 1".into());
        }
        self.model.validate().map_err(|e| RunError::Config(e.to_string()))?;
        let mut names = std::collections::BTreeSet::new();
        for arm in &self.arms {
            if arm.name == BASE_ARM || !names.insert(arm.name.as_str()) {
                return bad(format!("arm name {:?} is reserved or repeated", arm.name));
            }
            if arm.batch_size == 0 {
                return bad(format!("arm {}: batch_size must be at least 1", arm.name));
            }
            arm.plan.validate(&self.model).map_err(|e| RunError::Config(format!("arm {}: {e}", arm.name)))?;
            if let Some(l) = &arm.lti {
                l.validate().map_err(|e| RunError::Config(format!("arm {}: {e}", arm.name)))?;
            }
        }
        if let Some(s) = &self.sweep {
            if s.axis != SweepAxis::None && s.values.is_empty() {
                return bad(format!("sweep over {} has no values", s.axis.name()));
            }
            if let Some(a) = s.arms.iter().find(|a| !names.contains(a.as_str())) {
                return bad(format!("sweep names unknown arm {a:?}"));
            }
            for &v in &s.values {
                let ok = match s.axis {
                    SweepAxis::None => true,
                    SweepAxis::Epsilon => v > 0.0,
                    SweepAxis::Augmentation => v >= 0.0 && v.fract() == 0.0,
                    _ => v >= 1.0 && v.fract() == 0.0,
                };
                if !ok || !v.is_finite() {
                    return bad(format!("invalid {} value {v}", s.axis.name()));
                }
            }
            if s.axis == SweepAxis::NLayers && s.values.iter().any(|&v| v as usize > self.model.n_layers) {
                return bad("n_layers value exceeds the model depth".into());
            }
        }
        for v in self.variants() {
            v.arm.plan.validate(&self.model).map_err(|e| RunError::Config(format!("arm {}: {e}", v.arm.name)))?;
        }
        Ok(())
    }

    pub fn arm(&self, name: &str) -> RunResult<&ArmConfig> {
        self.arms.iter().find(|a| a.name == name).ok_or_else(|| RunError::Config(format!("no arm named {name:?}")))
    }

    fn sweeps(&self, arm: &str) -> Option<&SweepConfig> {
        self.sweep
            .as_ref()
            .filter(|s| s.axis != SweepAxis::None && (s.arms.is_empty() || s.arms.iter().any(|a| a == arm)))
    }

    /// Every (arm, sweep value) pair, in config order.
    pub fn variants(&self) -> Vec<ArmVariant> {
        let mut out = Vec::new();
        for arm in &self.arms {
            match self.sweeps(&arm.name) {
                Some(s) => {
                    for &v in &s.values {
                        out.push(ArmVariant { arm: apply_axis(arm, s.axis, v, &self.model), axis: Some(s.axis), value: Some(v) });
                    }
                }
                None => out.push(ArmVariant { arm: arm.clone(), axis: None, value: None }),
            }
        }
        out
    }
}

fn apply_axis(arm: &ArmConfig, axis: SweepAxis, v: f64, model: &ModelConfig) -> ArmConfig {
    let mut a = arm.clone();
    let n = if axis.is_count() { v as usize } else { 0 };
    match axis {
        SweepAxis::None => {}
        SweepAxis::Epsilon => a.plan.epsilon = v,
        SweepAxis::BatchSize => a.batch_size = n,
        SweepAxis::Augmentation => a.augment = n,
        SweepAxis::NLayers => {
            let start = a.plan.target_layers(model)[0].min(model.n_layers - n);
            a.plan.layers = (start..start + n).collect();
            if n > 1 && a.plan.method == Method::Rome {
                a.plan.method = Method::Multilayer;
            }
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seeds = [0, 1]
n_edits = 4

[model]
n_layers = 6

[[arms]]
name = "ROME"
plan = { method = "rome" }

[[arms]]
name = "ROME-LTI"
plan = { method = "rome" }
lti = { lambda = 0.0625, beta = 0.0325 }

[[arms]]
name = "FT-L"
plan = { method = "ft_l", steps = 10 }

[sweep]
axis = "n_layers"
values = [1, 3]
arms = ["ROME", "FT-L"]
"#;

    #[test]
    fn parses_and_expands_sweep() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let v = cfg.variants();
        let names: Vec<_> = v.iter().map(|v| (v.arm.name.as_str(), v.value)).collect();
        assert_eq!(names, [("ROME", Some(1.0)), ("ROME", Some(3.0)), ("ROME-LTI", None), ("FT-L", Some(1.0)), ("FT-L", Some(3.0))]);
        assert_eq!(v[1].arm.plan.layers, [1, 2, 3]);
        assert_eq!(v[1].arm.plan.method, Method::Multilayer);
        assert_eq!(v[0].arm.plan.method, Method::Rome);
        assert_eq!(v[2].arm.lti.as_ref().unwrap().alpha, LtiConfig::default().alpha);
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_bad_configs() {
        for (from, to) in [
            ("n_layers = 6", "n_layers = 6\nbogus = 1"),
            ("values = [1, 3]", "values = []"),
            ("values = [1, 3]", "values = [1, 7]"),
            ("arms = [\"ROME\", \"FT-L\"]", "arms = [\"FT\"]"),
            ("name = \"FT-L\"", "name = \"ROME\""),
            ("seeds = [0, 1]", "seeds = []"),
            ("plan = { method = \"rome\" }\n\n[[arms]]\nname = \"ROME-LTI\"", "plan = { method = \"rome\", layers = [9] }\n\n[[arms]]\nname = \"ROME-LTI\""),
        ] {
            let text = SAMPLE.replacen(from, to, 1);
            assert_ne!(text, SAMPLE, "{from}");
            assert!(ExperimentConfig::from_toml(&text).is_err(), "{to}");
        }
    }

    #[test]
    fn epsilon_axis_sets_plan() {
        let text = SAMPLE.replace("axis = \"n_layers\"", "axis = \"epsilon\"").replace("values = [1, 3]", "values = [1e-4, 1e-3]");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let eps: Vec<f64> = cfg.variants().iter().filter(|v| v.arm.name == "FT-L").map(|v| v.arm.plan.epsilon).collect();
        assert_eq!(eps, [1e-4, 1e-3]);
    }
}
