// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rank-one and multi-layer editing through an optimized value vector.

use ndarray::{Array1, Array2};

use super::context::{prefix_seed, sample_prefixes, EditContext, NewKnowledgeTerms};
use super::covariance::CovarianceSet;
use super::linalg::batch_update_factored;
use super::plan::{tensor_delta, EditOutcome, EditPlan, EditRecord, LossTerms, Method, TraceStep};
use crate::error::{Error, Result};
use crate::factworld::EditRequest;
use crate::scalar::Scalar;
use crate::tinylm::{GradOptions, ModelState, Site};

/// Value of an objective over the value delta `h`, with its exact gradient.
#[derive(Debug, Clone)]
pub struct ObjectiveEval<T> {
    pub total: f64,
    pub grad: Array1<T>,
    /// Geometric mean of the target probability over the rewrite prompts.
    pub target_prob: f64,
    pub terms: Option<LossTerms>,
}

/// Objective minimized over `h` before the closed-form weight update.
pub trait ValueObjective<T: Scalar> {
    /// Per-edit data computed once on the unedited model.
    type Prepared;

    fn name(&self) -> String;

    fn prepare(&self, model: &ModelState<T>, edit: &EditRequest, ctx: &EditContext) -> Result<Self::Prepared>;

    fn evaluate(&self, prep: &Self::Prepared, model: &ModelState<T>, ctx: &EditContext, h: &Array1<T>) -> Result<ObjectiveEval<T>>;
}

/// Plain new-knowledge loss `−(1/N) Σ_j log P(o* | x_j ⊕ p(s, r))`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NewKnowledge;

impl<T: Scalar> ValueObjective<T> for NewKnowledge {
    type Prepared = ();

    fn name(&self) -> String {
        "plain".into()
    }

    fn prepare(&self, _: &ModelState<T>, _: &EditRequest, _: &EditContext) -> Result<()> {
        Ok(())
    }

    fn evaluate(&self, _: &(), model: &ModelState<T>, ctx: &EditContext, h: &Array1<T>) -> Result<ObjectiveEval<T>> {
        let (pass, scales) = ctx.patched_pass(model, h, &[])?;
        let NewKnowledgeTerms { loss, dlogits, target_prob } = super::context::new_knowledge_terms(ctx, &pass);
        let grads = pass.backward(model, Some(&dlogits), &[], GradOptions { param_grads: false, lowest_layer: ctx.layer });
        let grad = sum_patch_grads(&grads.patches, &scales, h.len());
        Ok(ObjectiveEval { total: loss, grad, target_prob, terms: Some(LossTerms { l_n: loss, ..Default::default() }) })
    }
}

/// `Σ_i scale_i · grad_i`.
pub(crate) fn sum_patch_grads<T: Scalar>(patches: &[Array1<T>], scales: &[T], width: usize) -> Array1<T> {
    let mut g = Array1::<T>::zeros(width);
    for (p, &s) in patches.iter().zip(scales) {
        if s == T::one() {
            g += p;
        } else {
            g.scaled_add(s, p);
        }
    }
    g
}

/// Result of optimizing `h` for one edit.
#[derive(Debug, Clone)]
pub struct ValueSolution<T> {
    pub h: Array1<T>,
    /// MLP output at the subject's last token before the edit.
    pub v: Array1<T>,
    pub trace: Vec<TraceStep>,
}

/// Adam on `h`, projected after every step onto `‖h‖ ≤ clamp_norm_factor · ‖v‖`.
pub fn optimize_value<T: Scalar, O: ValueObjective<T>>(
    model: &ModelState<T>,
    edit: &EditRequest,
    ctx: &EditContext,
    plan: &EditPlan,
    objective: &O,
) -> Result<ValueSolution<T>> {
    let v = ctx.capture(model, ctx.layer, Site::MlpOut)?;
    let v_norm = v.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
    let max_norm = plan.clamp_norm_factor * v_norm;
    let prep = objective.prepare(model, edit, ctx)?;
    let mut h = Array1::<T>::zeros(v.len());
    let mut m1 = Array1::<f64>::zeros(v.len());
    let mut m2 = Array1::<f64>::zeros(v.len());
    let (b1, b2) = (0.9f64, 0.999f64);
    let mut trace = Vec::new();
    for step in 0..plan.v_steps {
        let ev = objective.evaluate(&prep, model, ctx, &h)?;
        if !ev.total.is_finite() || ev.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("objective is {} at step {step} of edit {}", ev.total, edit.id)));
        }
        trace.push(TraceStep {
            edit: Some(edit.id),
            step,
            loss: ev.total,
            target_prob: Some(ev.target_prob),
            terms: ev.terms,
            max_abs_dev: None,
            h_ratio: Some(h.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt() / v_norm),
        });
        if ev.target_prob > plan.v_target_prob {
            break;
        }
        let t = step as i32 + 1;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for ((hi, gi), (a, b)) in h.iter_mut().zip(&ev.grad).zip(m1.iter_mut().zip(m2.iter_mut())) {
            let g = gi.f64();
            *a = b1 * *a + (1.0 - b1) * g;
            *b = b2 * *b + (1.0 - b2) * g * g;
            *hi -= T::of(plan.v_lr * (*a / c1) / ((*b / c2).sqrt() + 1e-8));
        }
        let norm = h.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
        if norm > max_norm {
            h *= T::of(if norm > 0.0 { max_norm / norm } else { 0.0 });
        }
    }
    Ok(ValueSolution { h, v, trace })
}

/// `w_out` of a layer in the column convention `[d_model, d_mlp]`.
fn w_col<T: Scalar>(model: &ModelState<T>, layer: usize) -> Array2<T> {
    model.weights.layers[layer].w_out.t().to_owned()
}

/// Edits one fact at a single layer: computes `k*`, optimizes `h`, sets
/// `v* = v + h` and inserts `(k*, v*)` with the rank-one update.
pub fn rome_edit<T: Scalar, O: ValueObjective<T>>(
    model: ModelState<T>,
    edit: &EditRequest,
    plan: &EditPlan,
    objective: &O,
    cov: &CovarianceSet,
) -> Result<EditOutcome<T>> {
    if plan.method != Method::Rome {
        return Err(Error::Config(format!("rome_edit called with method {}", plan.method.name())));
    }
    plan.validate(&model.config)?;
    let layer = plan.target_layers(&model.config)[0];
    let prefixes = sample_prefixes(&model, plan.n_prefixes, plan.prefix_len, prefix_seed(plan.seed, edit.id))?;
    let chol = cov.get(layer)?.factor::<T>()?;
    let mut ctx = EditContext::new(&model, edit, layer, &prefixes)?;
    if plan.footprint {
        ctx = ctx.with_footprint(&model, &chol)?;
    }
    let sol = optimize_value(&model, edit, &ctx, plan, objective)?;
    let k = ctx.key(&model, layer)?;
    let v_star = &sol.v + &sol.h;
    let mut model = model;
    let before = model.weights.layers[layer].w_out.clone();
    let keys = k.insert_axis(ndarray::Axis(1));
    let values = v_star.insert_axis(ndarray::Axis(1));
    let w_new = batch_update_factored(w_col(&model, layer).view(), keys.view(), values.view(), &chol)?;
    model.weights.layers[layer].w_out = w_new.t().as_standard_layout().to_owned();
    let after = &model.weights.layers[layer].w_out;
    let delta = tensor_delta(layer, "w_out", before.as_slice().unwrap(), after.as_slice().unwrap());
    let steps = sol.trace.len();
    Ok(EditOutcome {
        model,
        record: EditRecord {
            method: Method::Rome,
            objective: objective.name(),
            layers: vec![layer],
            edit_ids: vec![edit.id],
            plan: plan.clone(),
            layer_deltas: vec![delta],
            trace: sol.trace,
            steps,
        },
    })
}

/// Spreads edits over several ascending layers. The value delta is found at
/// the top layer; then, bottom-up, each layer receives an even share of the
/// residual still missing at the top layer, inserted with a joint solve over
/// the batch.
pub fn multilayer_edit<T: Scalar, O: ValueObjective<T>>(
    model: ModelState<T>,
    edits: &[EditRequest],
    plan: &EditPlan,
    objective: &O,
    cov: &CovarianceSet,
) -> Result<EditOutcome<T>> {
    if !matches!(plan.method, Method::Multilayer | Method::Rome) {
        return Err(Error::Config(format!("multilayer_edit called with method {}", plan.method.name())));
    }
    if edits.is_empty() {
        return Err(Error::Argument("no edits given".into()));
    }
    plan.validate(&model.config)?;
    let layers = plan.target_layers(&model.config);
    let top = *layers.last().unwrap();
    let chols = layers.iter().map(|&l| cov.get(l)?.factor::<T>()).collect::<Result<Vec<_>>>()?;

    let mut ctxs = Vec::with_capacity(edits.len());
    let mut targets = Vec::with_capacity(edits.len());
    let mut trace = Vec::new();
    for e in edits {
        let prefixes = sample_prefixes(&model, plan.n_prefixes, plan.prefix_len, prefix_seed(plan.seed, e.id))?;
        let mut ctx = EditContext::new(&model, e, top, &prefixes)?;
        if plan.footprint && layers.len() == 1 {
            ctx = ctx.with_footprint(&model, &chols[0])?;
        }
        let sol = optimize_value(&model, e, &ctx, plan, objective)?;
        let z = ctx.capture(&model, top, Site::Resid)? + &sol.h;
        trace.extend(sol.trace);
        targets.push(z);
        ctxs.push(ctx);
    }

    let mut model = model;
    let originals: Vec<Array2<T>> = layers.iter().map(|&l| model.weights.layers[l].w_out.clone()).collect();
    for (i, &l) in layers.iter().enumerate() {
        let remaining = T::of((layers.len() - i) as f64);
        let mut keys = Array2::<T>::zeros((model.config.d_mlp, edits.len()));
        let mut values = Array2::<T>::zeros((model.config.d_model, edits.len()));
        for (j, (ctx, z)) in ctxs.iter().zip(&targets).enumerate() {
            let resid = z - &ctx.capture(&model, top, Site::Resid)?;
            let v = ctx.capture(&model, l, Site::MlpOut)?;
            values.column_mut(j).assign(&(&v + &(resid / remaining)));
            keys.column_mut(j).assign(&ctx.key(&model, l)?);
        }
        let w_new = batch_update_factored(w_col(&model, l).view(), keys.view(), values.view(), &chols[i])?;
        model.weights.layers[l].w_out = w_new.t().as_standard_layout().to_owned();
    }
    let layer_deltas = layers
        .iter()
        .zip(&originals)
        .map(|(&l, before)| {
            let after = &model.weights.layers[l].w_out;
            tensor_delta(l, "w_out", before.as_slice().unwrap(), after.as_slice().unwrap())
        })
        .collect();
    let steps = trace.len();
    Ok(EditOutcome {
        model,
        record: EditRecord {
            method: plan.method,
            objective: objective.name(),
            layers,
            edit_ids: edits.iter().map(|e| e.id).collect(),
            plan: plan.clone(),
            layer_deltas,
            trace,
            steps,
        },
    })
}
