// SPDX-License-Identifier: MIT OR Apache-2.0

//! Direct fine-tuning of MLP weights, optionally inside an L∞ ball.

use ndarray::Array2;

use super::context::subject_last_position;
use super::plan::{tensor_delta, EditOutcome, EditPlan, EditRecord, LossTerms, Method, TraceStep};
use crate::error::{Error, Result};
use crate::factworld::EditRequest;
use crate::lti::{Lti, Reference};
use crate::scalar::Scalar;
use crate::tinylm::ops::log_softmax;
use crate::tinylm::{tensor_shapes, Adam, GradOptions, ModelState, Pass, SiteGrad, TokenId, TokenSeq, Weights};

struct Sample {
    tokens: TokenSeq,
    prompt_len: usize,
    answer: TokenSeq,
    weight: f64,
}

/// Samples of every edit; the first sample of edit `i` sits at `starts[i]`
/// and is `p(s, r) ⊕ o*`.
fn samples<T: Scalar>(model: &ModelState<T>, edits: &[EditRequest]) -> Result<(Vec<Sample>, Vec<usize>)> {
    let tok = &model.tokenizer;
    let mut out = Vec::new();
    let mut starts = Vec::with_capacity(edits.len());
    for e in edits {
        starts.push(out.len());
        let mut pairs = vec![(e.prompt.as_str(), e.target.as_str())];
        pairs.extend(e.opt_prompts.iter().map(|p| (p.prompt.as_str(), p.answer.as_str())));
        let weight = 1.0 / (edits.len() * pairs.len()) as f64;
        for (p, a) in pairs {
            let mut tokens = tok.tokenize(p)?;
            let answer = tok.tokenize(a)?;
            if tokens.is_empty() || answer.is_empty() {
                return Err(Error::Argument("fine-tuning prompt and answer must be non-empty".into()));
            }
            let prompt_len = tokens.len();
            tokens.extend_from_slice(&answer[..answer.len() - 1]);
            out.push(Sample { tokens, prompt_len, answer, weight });
        }
    }
    Ok((out, starts))
}

/// LTI constraints of every edit, computed once on the unedited model.
struct Aux<'a> {
    lti: &'a Lti,
    references: Vec<Reference>,
    subject_pos: Vec<usize>,
}

impl<'a> Aux<'a> {
    fn new<T: Scalar>(lti: &'a Lti, model: &ModelState<T>, edits: &[EditRequest], layers: &[usize]) -> Result<Self> {
        let top = *layers.iter().max().unwrap();
        let mut references = Vec::with_capacity(edits.len());
        let mut subject_pos = Vec::with_capacity(edits.len());
        for e in edits {
            references.push(Reference::compute(model, e, &lti.cfg, top)?);
            let tok = &model.tokenizer;
            subject_pos.push(subject_last_position(&tok.tokenize(&e.prompt)?, &tok.tokenize(&e.subject)?)?);
        }
        Ok(Self { lti, references, subject_pos })
    }

    /// Adds `α`-scaling of the new-knowledge gradient and the edit-averaged
    /// SRC and ODC terms; returns the combined loss and its parts.
    fn apply<T: Scalar>(
        &self,
        model: &ModelState<T>,
        pass: &Pass<T>,
        samples: &[Sample],
        starts: &[usize],
        l_n: f64,
        dlogits: &mut Array2<T>,
    ) -> (f64, LossTerms, Vec<SiteGrad<T>>) {
        let cfg = &self.lti.cfg;
        dlogits.mapv_inplace(|g| g * T::of(cfg.alpha));
        let w = 1.0 / starts.len() as f64;
        let (mut l_src, mut l_odc) = (0.0, 0.0);
        let mut injections = Vec::new();
        for ((&si, reference), &pos) in starts.iter().zip(&self.references).zip(&self.subject_pos) {
            let out_row = pass.row(si, samples[si].prompt_len - 1);
            let (src, odc, inj) = self.lti.constraint_terms(reference, model, pass, pass.row(si, pos), out_row, w, dlogits);
            l_src += w * src;
            l_odc += w * odc;
            injections.extend(inj);
        }
        let total = cfg.lambda * l_src + cfg.beta * l_odc + cfg.alpha * l_n;
        (total, LossTerms { l_src, l_odc, l_n }, injections)
    }
}

/// Edit-weighted mean of `−log P(answer | prompt)` and its logit gradient.
fn loss_and_grad<T: Scalar>(pass: &Pass<T>, samples: &[Sample]) -> (f64, Array2<T>) {
    let mut dlogits = Array2::<T>::zeros(pass.logits.dim());
    let mut loss = 0.0;
    for (si, s) in samples.iter().enumerate() {
        let w = T::of(s.weight);
        for (i, &t) in s.answer.iter().enumerate() {
            let row = pass.row(si, s.prompt_len - 1 + i);
            let ls = log_softmax(pass.logits.row(row));
            loss -= s.weight * ls[t as usize].f64();
            let mut g = dlogits.row_mut(row);
            for (gj, lj) in g.iter_mut().zip(ls.iter()) {
                *gj += lj.exp() * w;
            }
            g[t as usize] -= w;
        }
    }
    (loss, dlogits)
}

/// Flat tensor indices (in [`tensor_shapes`] order) of the MLP weights of `layers`.
fn mlp_tensors<T: Scalar>(model: &ModelState<T>, layers: &[usize]) -> Vec<(usize, usize, &'static str)> {
    let names = tensor_shapes(&model.config);
    let mut out = Vec::new();
    for &l in layers {
        for t in ["w_in", "w_out"] {
            let name = format!("layers.{l}.{t}");
            let idx = names.iter().position(|(n, _)| *n == name).expect("tensor exists");
            out.push((idx, l, t));
        }
    }
    out
}

/// Nearest point of `[x0 − eps, x0 + eps]`.
pub(crate) fn project_linf<T: Scalar>(x: T, x0: T, eps: T) -> T {
    x.max(x0 - eps).min(x0 + eps)
}

struct Eval<T> {
    loss: f64,
    terms: Option<LossTerms>,
    grads: Weights<T>,
}

fn evaluate<T: Scalar>(
    model: &ModelState<T>,
    seqs: &[&[TokenId]],
    samples: &[Sample],
    starts: &[usize],
    aux: Option<&Aux>,
    lowest: usize,
) -> Result<Eval<T>> {
    let pass = Pass::run(model, seqs, &[])?;
    let (l_n, mut dlogits) = loss_and_grad(&pass, samples);
    let (loss, terms, injections) = match aux {
        Some(a) => {
            let (total, terms, inj) = a.apply(model, &pass, samples, starts, l_n, &mut dlogits);
            (total, Some(terms), inj)
        }
        None => (l_n, None, Vec::new()),
    };
    let grads = pass
        .backward(model, Some(&dlogits), &injections, GradOptions { param_grads: true, lowest_layer: lowest })
        .weights
        .expect("parameter gradients requested");
    Ok(Eval { loss, terms, grads })
}

fn finetune<T: Scalar>(
    model: ModelState<T>,
    edits: &[EditRequest],
    plan: &EditPlan,
    epsilon: Option<f64>,
    lti: Option<&Lti>,
) -> Result<EditOutcome<T>> {
    if edits.is_empty() {
        return Err(Error::Argument("no edits given".into()));
    }
    plan.validate(&model.config)?;
    let layers = plan.target_layers(&model.config);
    let (samples, starts) = samples(&model, edits)?;
    let aux = lti.map(|l| Aux::new(l, &model, edits, &layers)).transpose()?;
    let seqs: Vec<&[TokenId]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    let tensors = mlp_tensors(&model, &layers);
    let mut mask = vec![false; tensor_shapes(&model.config).len()];
    for &(i, _, _) in &tensors {
        mask[i] = true;
    }
    let originals: Vec<Vec<T>> = {
        let flat = model.weights.flat();
        tensors.iter().map(|&(i, _, _)| flat[i].to_vec()).collect()
    };
    let lowest = *layers.iter().min().unwrap();
    let eps = epsilon.map(T::of);

    let mut model = model;
    let mut adam = Adam::new(&model.weights);
    let mut trace = Vec::new();
    for step in 0..plan.steps {
        let ev = evaluate(&model, &seqs, &samples, &starts, aux.as_ref(), lowest)?;
        let (loss, terms) = (ev.loss, ev.terms);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("fine-tuning loss is {loss} at step {step}")));
        }
        if loss < plan.loss_threshold {
            trace.push(TraceStep { edit: None, step, loss, target_prob: None, terms, max_abs_dev: None, h_ratio: None });
            break;
        }
        let grads = ev.grads;
        adam.step(&mut model.weights, &grads, plan.lr, Some(&mask));
        let mut max_dev: f64 = 0.0;
        let mut flat = model.weights.flat_mut();
        for (&(i, _, _), orig) in tensors.iter().zip(&originals) {
            for (x, &x0) in flat[i].iter_mut().zip(orig) {
                if let Some(e) = eps {
                    *x = project_linf(*x, x0, e);
                }
                max_dev = max_dev.max((x.f64() - x0.f64()).abs());
            }
        }
        trace.push(TraceStep { edit: None, step, loss, target_prob: None, terms, max_abs_dev: Some(max_dev), h_ratio: None });
    }
    let flat = model.weights.flat();
    let layer_deltas = tensors
        .iter()
        .zip(&originals)
        .map(|(&(i, l, name), orig)| tensor_delta(l, name, orig, flat[i]))
        .collect();
    let steps = trace.iter().filter(|t| t.max_abs_dev.is_some()).count();
    Ok(EditOutcome {
        record: EditRecord {
            method: plan.method,
            objective: if lti.is_some() { "lti" } else { "plain" }.into(),
            layers,
            edit_ids: edits.iter().map(|e| e.id).collect(),
            plan: plan.clone(),
            layer_deltas,
            trace,
            steps,
        },
        model,
    })
}

/// Fine-tunes the MLP weights of the target layers on `−log P(o* | p(s, r))`.
pub fn ft_edit<T: Scalar>(model: ModelState<T>, edits: &[EditRequest], plan: &EditPlan) -> Result<EditOutcome<T>> {
    if plan.method != Method::Ft {
        return Err(Error::Config(format!("ft_edit called with method {}", plan.method.name())));
    }
    finetune(model, edits, plan, None, None)
}

/// [`ft_edit`] with every step projected onto `[θ₀ − ε, θ₀ + ε]`.
pub fn ftl_edit<T: Scalar>(model: ModelState<T>, edits: &[EditRequest], plan: &EditPlan) -> Result<EditOutcome<T>> {
    if plan.method != Method::FtL {
        return Err(Error::Config(format!("ftl_edit called with method {}", plan.method.name())));
    }
    finetune(model, edits, plan, Some(plan.epsilon), None)
}

/// [`ft_edit`] or [`ftl_edit`] (by `plan.method`) on `λ·L_SRC + β·L_ODC + α·L_FT`,
/// with the constraints read on `p(s, r)` of every edit and averaged.
pub fn ft_lti_edit<T: Scalar>(model: ModelState<T>, edits: &[EditRequest], plan: &EditPlan, lti: &Lti) -> Result<EditOutcome<T>> {
    match plan.method {
        Method::Ft => finetune(model, edits, plan, None, Some(lti)),
        Method::FtL => finetune(model, edits, plan, Some(plan.epsilon), Some(lti)),
        m => Err(Error::Config(format!("ft_lti_edit called with method {}", m.name()))),
    }
}
