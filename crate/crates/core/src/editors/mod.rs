// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parameter-modifying editors: fine-tuning, L∞-constrained fine-tuning,
//! rank-one editing and its multi-layer batch variant.

mod context;
mod covariance;
mod finetune;
pub mod linalg;
mod plan;
mod rome;

pub use context::{compute_key, sample_prefixes, subject_last_position, EditContext, OptSequence};
pub use covariance::{estimate_covariance, CovarianceSet, CovarianceStat};
pub use finetune::{ft_edit, ft_lti_edit, ftl_edit};
pub use linalg::{batch_update, rank_one_update};
pub use plan::{EditOutcome, EditPlan, EditRecord, LayerDelta, LossTerms, Method, TraceStep};
pub use rome::{multilayer_edit, optimize_value, rome_edit, NewKnowledge, ObjectiveEval, ValueObjective, ValueSolution};

pub(crate) use context::{new_knowledge_terms, prefix_seed, NewKnowledgeTerms};
pub(crate) use rome::sum_patch_grads;

use crate::error::Result;
use crate::factworld::EditRequest;
use crate::scalar::Scalar;
use crate::tinylm::ModelState;

/// Dispatches on `plan.method` with the plain objective.
pub fn apply_plan<T: Scalar>(
    model: ModelState<T>,
    edits: &[EditRequest],
    plan: &EditPlan,
    cov: &CovarianceSet,
) -> Result<EditOutcome<T>> {
    apply_plan_with(model, edits, plan, &NewKnowledge, cov)
}

/// Dispatches on `plan.method`; `objective` drives the value-based methods.
pub fn apply_plan_with<T: Scalar, O: ValueObjective<T>>(
    model: ModelState<T>,
    edits: &[EditRequest],
    plan: &EditPlan,
    objective: &O,
    cov: &CovarianceSet,
) -> Result<EditOutcome<T>> {
    match plan.method {
        Method::Ft => ft_edit(model, edits, plan),
        Method::FtL => ftl_edit(model, edits, plan),
        Method::Rome if edits.len() == 1 => rome_edit(model, &edits[0], plan, objective, cov),
        Method::Rome | Method::Multilayer => multilayer_edit(model, edits, plan, objective, cov),
    }
}
