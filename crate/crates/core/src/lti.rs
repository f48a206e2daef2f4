// SPDX-License-Identifier: MIT OR Apache-2.0

//! Learn-to-inference objective: aligns the edited model on `p(s, r)` with
//! the unedited model reading the new fact in context.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::editors::{
    new_knowledge_terms, prefix_seed, sample_prefixes, sum_patch_grads, EditContext, LossTerms, NewKnowledgeTerms,
    ObjectiveEval, ValueObjective,
};
use crate::error::{Error, Result};
use crate::factworld::EditRequest;
use crate::scalar::Scalar;
use crate::tinylm::ops::{layer_norm, layer_norm_backward};
use crate::tinylm::{GradOptions, ModelState, Pass, Site, SiteGrad, TokenId};

/// How a hidden vector is turned into a distribution for the SRC term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrcMode {
    /// Softmax over the hidden coordinates.
    #[default]
    Softmax,
    /// Decode through the final norm and the unembedding.
    LogitLens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextTemplate {
    #[default]
    ImagineThat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LtiConfig {
    /// SRC coefficient.
    pub lambda: f64,
    /// ODC coefficient.
    pub beta: f64,
    /// New-knowledge coefficient.
    pub alpha: f64,
    /// Layer `m` of the subject representation constraint; defaults to the
    /// model's default source layer.
    pub src_layer: Option<usize>,
    /// Site read at `src_layer`.
    pub src_site: Site,
    /// Edit layer `l` used by [`lti_objective`]; the editors pass their own.
    pub edit_layer: Option<usize>,
    pub mode: SrcMode,
    pub template: ContextTemplate,
    pub n_prefixes: usize,
}

impl Default for LtiConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0625,
            beta: 0.0325,
            alpha: 0.15,
            src_layer: None,
            src_site: Site::MlpOut,
            edit_layer: None,
            mode: SrcMode::Softmax,
            template: ContextTemplate::ImagineThat,
            n_prefixes: 5,
        }
    }
}

impl LtiConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta), ("alpha", self.alpha)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("lti.{name} must be finite and non-negative")));
            }
        }
        if !matches!(self.src_site, Site::MlpOut | Site::Resid) {
            return Err(Error::Config("lti.src_site must be mlp_out or resid".into()));
        }
        if self.n_prefixes == 0 {
            return Err(Error::Config("lti.n_prefixes must be at least 1".into()));
        }
        Ok(())
    }

    /// Source layer for an edit at `edit_layer`; must lie strictly above it.
    pub fn resolve_src_layer<T: Scalar>(&self, model: &ModelState<T>, edit_layer: usize) -> Result<usize> {
        let n = model.config.n_layers;
        let m = match self.src_layer {
            Some(m) => m,
            None => model.config.default_src_layer().max(edit_layer + 1),
        };
        if m <= edit_layer || m >= n {
            return Err(Error::Config(format!("src layer {m} must satisfy {edit_layer} < m < {n}")));
        }
        Ok(m)
    }

    fn needs_reference(&self) -> bool {
        self.lambda != 0.0 || self.beta != 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    pub l_src: f64,
    pub l_odc: f64,
    pub l_n: f64,
    pub total: f64,
    pub grad: Array1<T>,
}

/// `Imagine that <s r o*>. <p(s, r)>`.
pub fn build_context_prompt(edit: &EditRequest) -> String {
    format!("Imagine that {} {}", edit.context_statement, edit.prompt)
}

/// `Σ p_i log(p_i / q_i)` with `0 · log 0 = 0`.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Argument(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    for (name, d) in [("p", p), ("q", q)] {
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-6 || d.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Argument(format!("{name} is not a distribution (sum {s})")));
        }
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::DivergenceUndefined { index: i });
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(0.0))
}

fn log_softmax64<T: Scalar>(x: ArrayView1<'_, T>) -> Array1<f64> {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    let lse = max + x.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
    x.mapv(|v| v.f64() - lse)
}

/// `KL(softmax(x) ‖ q)` and its gradient w.r.t. `x`, given `log q`.
fn kl_logits<T: Scalar>(x: ArrayView1<'_, T>, log_q: &Array1<f64>) -> (f64, Array1<f64>) {
    let log_p = log_softmax64(x);
    let p = log_p.mapv(f64::exp);
    let kl: f64 = p.iter().zip(&log_p).zip(log_q).map(|((pi, lp), lq)| pi * (lp - lq)).sum();
    let grad = Array1::from_iter(p.iter().zip(&log_p).zip(log_q).map(|((pi, lp), lq)| pi * (lp - lq - kl)));
    (kl.max(0.0), grad)
}

/// Logit-lens readout of hidden rows, with what the backward pass needs.
struct Lens<T> {
    logits: Array2<T>,
    cache: crate::tinylm::ops::LnCache<T>,
}

fn lens<T: Scalar>(model: &ModelState<T>, x: ArrayView1<'_, T>) -> Lens<T> {
    let w = &model.weights;
    let (y, cache) = layer_norm(&x.to_owned().insert_axis(ndarray::Axis(0)), &w.lnf_g, &w.lnf_b);
    Lens { logits: y.dot(&w.unembed), cache }
}

fn lens_backward<T: Scalar>(model: &ModelState<T>, l: &Lens<T>, dlogits: &Array1<T>) -> Array1<T> {
    let w = &model.weights;
    let dy = dlogits.clone().insert_axis(ndarray::Axis(0)).dot(&w.unembed.t());
    layer_norm_backward(&dy, &l.cache, &w.lnf_g, None).row(0).to_owned()
}

/// Reference captures of the unedited model on the context prompt.
#[derive(Debug, Clone)]
pub struct Reference {
    pub src_layer: usize,
    /// `log` of the SRC reference distribution.
    pub src_log_q: Array1<f64>,
    /// `log` of the next-token distribution at the final position.
    pub out_log_q: Array1<f64>,
}

impl Reference {
    pub fn compute<T: Scalar>(model: &ModelState<T>, edit: &EditRequest, cfg: &LtiConfig, edit_layer: usize) -> Result<Self> {
        let src_layer = cfg.resolve_src_layer(model, edit_layer)?;
        let tok = &model.tokenizer;
        let tokens = tok.tokenize(&build_context_prompt(edit))?;
        let subject = tok.tokenize(&edit.subject)?;
        let pos = crate::editors::subject_last_position(&tokens, &subject)?;
        let pass = Pass::run(model, &[&tokens], &[])?;
        let hidden = pass.site_rows(src_layer, cfg.src_site).row(pass.row(0, pos));
        let src_log_q = match cfg.mode {
            SrcMode::Softmax => log_softmax64(hidden),
            SrcMode::LogitLens => log_softmax64(lens(model, hidden).logits.row(0)),
        };
        let out_log_q = log_softmax64(pass.logits_row(0, tokens.len() - 1));
        Ok(Self { src_layer, src_log_q, out_log_q })
    }
}

/// Weighted LTI objective `λ·L_SRC + β·L_ODC + α·L_N` over the value delta.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Lti {
    pub cfg: LtiConfig,
}

impl Lti {
    pub fn new(cfg: LtiConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn breakdown<T: Scalar>(
        &self,
        reference: &Reference,
        model: &ModelState<T>,
        ctx: &EditContext,
        h: &Array1<T>,
    ) -> Result<(LossBreakdown<T>, f64)> {
        let cfg = &self.cfg;
        let extra_seq: Vec<(&[TokenId], usize)> =
            if cfg.needs_reference() { vec![(ctx.prompt.as_slice(), ctx.subject_pos)] } else { Vec::new() };
        let (pass, scales) = ctx.patched_pass(model, h, &extra_seq)?;
        let NewKnowledgeTerms { loss: l_n, mut dlogits, target_prob } = new_knowledge_terms(ctx, &pass);
        if cfg.alpha != 1.0 {
            dlogits.mapv_inplace(|g| g * T::of(cfg.alpha));
        }
        let mut l_src = 0.0;
        let mut l_odc = 0.0;
        let mut injections = Vec::new();
        if cfg.needs_reference() {
            let s = ctx.sequences.len();
            let (src, odc, inj) =
                self.constraint_terms(reference, model, &pass, pass.row(s, ctx.subject_pos), pass.row(s, ctx.prompt.len() - 1), 1.0, &mut dlogits);
            l_src = src;
            l_odc = odc;
            injections.extend(inj);
        }
        let grads = pass.backward(model, Some(&dlogits), &injections, GradOptions { param_grads: false, lowest_layer: ctx.layer });
        let grad = sum_patch_grads(&grads.patches, &scales, h.len());
        let total = cfg.lambda * l_src + cfg.beta * l_odc + cfg.alpha * l_n;
        Ok((LossBreakdown { l_src, l_odc, l_n, total, grad }, target_prob))
    }
}

impl Lti {
    /// SRC and ODC terms of one prompt read off `pass` at the subject row and
    /// the final prompt row. `weight·β·∂ODC` is added to `dlogits`; the SRC
    /// gradient, scaled by `weight·λ`, is returned as an injection.
    pub(crate) fn constraint_terms<T: Scalar>(
        &self,
        reference: &Reference,
        model: &ModelState<T>,
        pass: &Pass<T>,
        src_row: usize,
        out_row: usize,
        weight: f64,
        dlogits: &mut Array2<T>,
    ) -> (f64, f64, Option<SiteGrad<T>>) {
        let cfg = &self.cfg;
        let (l_odc, g) = kl_logits(pass.logits.row(out_row), &reference.out_log_q);
        let mut r = dlogits.row_mut(out_row);
        r.zip_mut_with(&g, |d, &gi| *d += T::of(weight * cfg.beta * gi));

        let hidden = pass.site_rows(reference.src_layer, cfg.src_site).row(src_row);
        let scale = weight * cfg.lambda;
        let (l_src, grad) = match cfg.mode {
            SrcMode::Softmax => {
                let (kl, g) = kl_logits(hidden, &reference.src_log_q);
                (kl, g.mapv(|x| T::of(scale * x)))
            }
            SrcMode::LogitLens => {
                let l = lens(model, hidden);
                let (kl, g) = kl_logits(l.logits.row(0), &reference.src_log_q);
                (kl, lens_backward(model, &l, &g.mapv(|x| T::of(scale * x))))
            }
        };
        let injection = (cfg.lambda != 0.0).then_some(SiteGrad { row: src_row, layer: reference.src_layer, site: cfg.src_site, grad });
        (l_src, l_odc, injection)
    }
}

impl<T: Scalar> ValueObjective<T> for Lti {
    type Prepared = Reference;

    fn name(&self) -> String {
        "lti".into()
    }

    fn prepare(&self, model: &ModelState<T>, edit: &EditRequest, ctx: &EditContext) -> Result<Reference> {
        Reference::compute(model, edit, &self.cfg, ctx.layer)
    }

    fn evaluate(&self, prep: &Reference, model: &ModelState<T>, ctx: &EditContext, h: &Array1<T>) -> Result<ObjectiveEval<T>> {
        let (b, target_prob) = self.breakdown(prep, model, ctx, h)?;
        Ok(ObjectiveEval {
            total: b.total,
            grad: b.grad,
            target_prob,
            terms: Some(LossTerms { l_src: b.l_src, l_odc: b.l_odc, l_n: b.l_n }),
        })
    }
}

/// Evaluates the objective for `h` patched at the edit layer. The first
/// prefix is expected to be empty.
pub fn lti_objective<T: Scalar>(
    model: &ModelState<T>,
    edit: &EditRequest,
    h: &Array1<T>,
    cfg: &LtiConfig,
    prefixes: &[String],
) -> Result<LossBreakdown<T>> {
    cfg.validate()?;
    let layer = cfg.edit_layer.unwrap_or_else(|| model.config.default_edit_layer());
    if h.len() != model.config.d_model {
        return Err(Error::Argument(format!("h has width {}, expected {}", h.len(), model.config.d_model)));
    }
    let ctx = EditContext::new(model, edit, layer, prefixes)?;
    let reference = Reference::compute(model, edit, cfg, layer)?;
    Ok(Lti { cfg: cfg.clone() }.breakdown(&reference, model, &ctx, h)?.0)
}

/// Prefixes for `edit` as the editors sample them.
pub fn edit_prefixes<T: Scalar>(model: &ModelState<T>, edit: &EditRequest, n: usize, len: usize, seed: u64) -> Result<Vec<String>> {
    sample_prefixes(model, n, len, prefix_seed(seed, edit.id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editors::tests::{toy_cov, toy_edit, toy_model, toy_model_cfg};
    use crate::editors::{rome_edit, EditPlan, NewKnowledge};
    use crate::factworld::{sample_edits, table3_world};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(lambda: f64, beta: f64, alpha: f64) -> LtiConfig {
        LtiConfig { lambda, beta, alpha, edit_layer: Some(0), src_layer: Some(1), ..Default::default() }
    }

    fn random_h(n: usize, scale: f64, seed: u64) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array1::from_iter((0..n).map(|_| rng.gen_range(-scale..scale)))
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_div(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        approx::assert_abs_diff_eq!(kl_div(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(matches!(kl_div(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::DivergenceUndefined { index: 1 })));
        assert!(kl_div(&[0.5, 0.4], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_from_logits_matches_kl_div() {
        let x = ndarray::array![0.3, -1.0, 2.0];
        let q = ndarray::array![0.2f64, 0.3, 0.5];
        let (kl, _) = kl_logits(x.view(), &q.mapv(f64::ln));
        let p = crate::tinylm::ops::softmax(x.view());
        approx::assert_abs_diff_eq!(kl, kl_div(p.as_slice().unwrap(), q.as_slice().unwrap()).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn context_prompt_table3() {
        let w = table3_world();
        let e = sample_edits(&w, 1, 0).unwrap().remove(0);
        let p = build_context_prompt(&e);
        assert!(p.ends_with(&e.prompt));
        assert_eq!(p.matches(e.subject.as_str()).count(), 2);
        let spike = w.entities.iter().position(|x| x.surface == "Spike Hughes").unwrap();
        let r = w.relations.iter().position(|r| r.name == "originates_from").unwrap();
        let phil = w.entities.iter().position(|x| x.surface == "Philadelphia").unwrap();
        let e = EditRequest::new(&w, 0, spike, r, phil).unwrap();
        assert_eq!(build_context_prompt(&e), "Imagine that Spike Hughes originates from Philadelphia. Spike Hughes originates from");
    }

    #[test]
    fn zero_coefficients_give_zero() {
        let m = toy_model();
        let e = toy_edit(&m);
        let b = lti_objective(&m, &e, &random_h(16, 0.1, 1), &cfg(0.0, 0.0, 0.0), &[String::new()]).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(b.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn terms_are_consistent_and_linear() {
        let m = toy_model();
        let e = toy_edit(&m);
        let pre = edit_prefixes(&m, &e, 3, 3, 0).unwrap();
        let h = random_h(16, 0.2, 2);
        let a = lti_objective(&m, &e, &h, &cfg(0.5, 0.25, 0.75), &pre).unwrap();
        assert!(a.l_src >= 0.0 && a.l_odc >= 0.0 && a.l_n >= 0.0);
        assert!((a.total - (0.5 * a.l_src + 0.25 * a.l_odc + 0.75 * a.l_n)).abs() < 1e-9);
        let b = lti_objective(&m, &e, &h, &cfg(1.0, 0.25, 0.75), &pre).unwrap();
        assert!((b.total - a.total - 0.5 * a.l_src).abs() < 1e-9);
        let again = lti_objective(&m, &e, &h, &cfg(0.5, 0.25, 0.75), &pre).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = toy_model_cfg(2, 32);
        let e = toy_edit(&m);
        let pre = edit_prefixes(&m, &e, 2, 3, 4).unwrap();
        for mode in [SrcMode::Softmax, SrcMode::LogitLens] {
            for site in [Site::MlpOut, Site::Resid] {
                let c = LtiConfig { mode, src_site: site, ..cfg(0.7, 0.3, 0.5) };
                let h = random_h(32, 0.3, 9);
                let an = lti_objective(&m, &e, &h, &c, &pre).unwrap().grad;
                for j in 0..32 {
                    let eps = 1e-5;
                    let mut hp = h.clone();
                    hp[j] += eps;
                    let mut hm = h.clone();
                    hm[j] -= eps;
                    let fd = (lti_objective(&m, &e, &hp, &c, &pre).unwrap().total
                        - lti_objective(&m, &e, &hm, &c, &pre).unwrap().total)
                        / (2.0 * eps);
                    assert!((fd - an[j]).abs() <= 1e-3 * fd.abs().max(an[j].abs()) + 1e-9, "{mode:?} {site:?} [{j}] fd {fd} vs {}", an[j]);
                }
            }
        }
    }

    #[test]
    fn degenerate_coefficients_reproduce_rome() {
        let m = toy_model();
        let e = toy_edit(&m);
        let cov = toy_cov(&m);
        let plan = EditPlan { n_prefixes: 3, ..Default::default() };
        let plain = rome_edit(m.clone(), &e, &plan, &NewKnowledge, &cov).unwrap();
        let lti = Lti::new(LtiConfig { lambda: 0.0, beta: 0.0, alpha: 1.0, ..Default::default() }).unwrap();
        let with = rome_edit(m, &e, &plan, &lti, &cov).unwrap();
        assert_eq!(plain.model, with.model);
        assert_eq!(with.record.objective, "lti");
    }

    #[test]
    fn lti_edit_records_terms() {
        let m = toy_model_cfg(3, 16);
        let e = toy_edit(&m);
        let cov = toy_cov(&m);
        let plan = EditPlan { n_prefixes: 2, layers: vec![0], ..Default::default() };
        let lti = Lti::new(LtiConfig { src_layer: Some(2), ..Default::default() }).unwrap();
        let out = rome_edit(m, &e, &plan, &lti, &cov).unwrap();
        let t = out.record.trace[0].terms.unwrap();
        assert!(t.l_src > 0.0 && t.l_odc > 0.0 && t.l_n > 0.0);
    }

    #[test]
    fn src_layer_must_exceed_edit_layer() {
        let m = toy_model();
        let e = toy_edit(&m);
        let c = LtiConfig { edit_layer: Some(1), src_layer: Some(1), ..Default::default() };
        assert!(matches!(lti_objective(&m, &e, &Array1::zeros(16), &c, &[String::new()]), Err(Error::Config(_))));
        let c = LtiConfig { edit_layer: Some(1), src_layer: None, ..Default::default() };
        assert!(lti_objective(&m, &e, &Array1::zeros(16), &c, &[String::new()]).is_err());
    }
}
