// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward and backward passes with capture and additive patch hooks.
//!
//! Several sequences can share one pass: their tokens are stacked into a
//! single row matrix so every projection is one GEMM, while attention stays
//! causal within each sequence.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use super::model::{ModelState, Weights};
use super::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_inplace, LnCache};
use super::tokenizer::TokenId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Where inside a layer a hidden vector is read or patched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Normalized MLP input (`h` in `f(W_in · h)`).
    MlpIn,
    /// MLP hidden activation after the nonlinearity: the key `k`.
    MlpAct,
    /// MLP output before it is added to the residual stream: the value `v`.
    MlpOut,
    /// Residual stream after the whole layer.
    Resid,
}

impl Site {
    pub fn width(self, d_model: usize, d_mlp: usize) -> usize {
        match self {
            Site::MlpAct => d_mlp,
            _ => d_model,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CapturePoint {
    pub layer: usize,
    pub position: usize,
    pub site: Site,
}

impl CapturePoint {
    pub fn new(layer: usize, position: usize, site: Site) -> Self {
        Self { layer, position, site }
    }
}

/// Additive intervention on one hidden vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T> {
    pub layer: usize,
    pub position: usize,
    pub site: Site,
    pub delta: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// `len × vocab` logits, one row per input position.
    pub logits: Array2<T>,
    pub captured: BTreeMap<CapturePoint, Array1<T>>,
}

/// Runs one sequence, recording the requested hidden vectors.
pub fn forward<T: Scalar>(
    model: &ModelState<T>,
    tokens: &[TokenId],
    captures: &[CapturePoint],
    patches: &[Patch<T>],
) -> Result<ForwardTrace<T>> {
    for c in captures {
        check_point(model, tokens.len(), c.layer, c.position)?;
    }
    let seq_patches: Vec<SeqPatch<'_, T>> = patches.iter().map(|p| SeqPatch { seq: 0, patch: p }).collect();
    let pass = Pass::run(model, &[tokens], &seq_patches)?;
    let captured = captures.iter().map(|&c| (c, pass.capture(0, c))).collect();
    Ok(ForwardTrace { logits: pass.logits, captured })
}

fn check_point<T>(model: &ModelState<T>, len: usize, layer: usize, position: usize) -> Result<()> {
    if layer >= model.config.n_layers {
        return Err(Error::Index(format!(
            "layer {layer} out of range for {} layers",
            model.config.n_layers
        )));
    }
    if position >= len {
        return Err(Error::Index(format!("position {position} out of range for length {len}")));
    }
    Ok(())
}

/// A patch bound to one sequence of a multi-sequence pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SeqPatch<'a, T> {
    pub seq: usize,
    pub patch: &'a Patch<T>,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// One `len × len` attention pattern per (sequence, head).
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    ln2: LnCache<T>,
    m: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
    out: Array2<T>,
    resid: Array2<T>,
}

/// Cached activations of a multi-sequence forward pass.
pub(crate) struct Pass<T> {
    offsets: Vec<usize>,
    lens: Vec<usize>,
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    xf: Array2<T>,
    pub logits: Array2<T>,
    /// Flattened `(row, layer, site)` of each patch, in input order.
    patch_rows: Vec<(usize, usize, Site)>,
}

fn apply_patches<T: Scalar>(x: &mut Array2<T>, rows: &[(usize, usize, Site)], patches: &[SeqPatch<'_, T>], layer: usize, site: Site) {
    for (&(row, l, s), p) in rows.iter().zip(patches) {
        if l == layer && s == site {
            let mut r = x.row_mut(row);
            r += &p.patch.delta;
        }
    }
}

impl<T: Scalar> Pass<T> {
    pub(crate) fn run(model: &ModelState<T>, seqs: &[&[TokenId]], patches: &[SeqPatch<'_, T>]) -> Result<Self> {
        let cfg = &model.config;
        let w = &model.weights;
        let (d, dm, nh) = (cfg.d_model, cfg.d_mlp, cfg.n_heads);
        let dh = cfg.head_dim();

        let mut offsets = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        let mut tokens = Vec::new();
        for sq in seqs {
            if sq.is_empty() {
                return Err(Error::Argument("cannot run an empty sequence".into()));
            }
            if sq.len() > cfg.max_seq_len {
                return Err(Error::Index(format!(
                    "sequence length {} exceeds max_seq_len {}",
                    sq.len(),
                    cfg.max_seq_len
                )));
            }
            offsets.push(tokens.len());
            lens.push(sq.len());
            for &t in sq.iter() {
                if t as usize >= cfg.vocab_size {
                    return Err(Error::Index(format!("token id {t} outside vocabulary")));
                }
                tokens.push(t);
            }
        }
        let mut patch_rows = Vec::with_capacity(patches.len());
        for p in patches {
            let len = *lens
                .get(p.seq)
                .ok_or_else(|| Error::Index(format!("patch refers to sequence {}", p.seq)))?;
            check_point(model, len, p.patch.layer, p.patch.position)?;
            let width = p.patch.site.width(d, dm);
            if p.patch.delta.len() != width {
                return Err(Error::Argument(format!(
                    "patch width {} does not match site width {width}",
                    p.patch.delta.len()
                )));
            }
            if p.patch.delta.iter().any(|x| !x.is_finite()) {
                return Err(Error::Argument("patch delta is not finite".into()));
            }
            patch_rows.push((offsets[p.seq] + p.patch.position, p.patch.layer, p.patch.site));
        }

        let n = tokens.len();
        let mut x = Array2::<T>::zeros((n, d));
        for (si, &off) in offsets.iter().enumerate() {
            for pos in 0..lens[si] {
                let t = tokens[off + pos] as usize;
                let mut row = x.row_mut(off + pos);
                row.assign(&w.tok_emb.row(t));
                row += &w.pos_emb.row(pos);
            }
        }

        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (li, lw) in w.layers.iter().enumerate() {
            let (a, ln1) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
            let q = a.dot(&lw.w_q);
            let k = a.dot(&lw.w_k);
            let v = a.dot(&lw.w_v);
            let mut ctx = Array2::<T>::zeros((n, d));
            let mut probs = Vec::with_capacity(seqs.len() * nh);
            for (si, &off) in offsets.iter().enumerate() {
                let len = lens[si];
                for h in 0..nh {
                    let cols = h * dh..(h + 1) * dh;
                    let qh = q.slice(s![off..off + len, cols.clone()]);
                    let kh = k.slice(s![off..off + len, cols.clone()]);
                    let vh = v.slice(s![off..off + len, cols.clone()]);
                    let mut sc = qh.dot(&kh.t()) * scale;
                    for i in 0..len {
                        for j in i + 1..len {
                            sc[[i, j]] = T::neg_infinity();
                        }
                        softmax_inplace(sc.row_mut(i));
                    }
                    ctx.slice_mut(s![off..off + len, cols]).assign(&sc.dot(&vh));
                    probs.push(sc);
                }
            }
            x = &x + &ctx.dot(&lw.w_o);

            let (mut m, ln2) = layer_norm(&x, &lw.ln2_g, &lw.ln2_b);
            apply_patches(&mut m, &patch_rows, patches, li, Site::MlpIn);
            let pre = m.dot(&lw.w_in);
            let mut act = pre.mapv(gelu);
            apply_patches(&mut act, &patch_rows, patches, li, Site::MlpAct);
            let mut out = act.dot(&lw.w_out);
            apply_patches(&mut out, &patch_rows, patches, li, Site::MlpOut);
            x = &x + &out;
            apply_patches(&mut x, &patch_rows, patches, li, Site::Resid);
            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                m,
                pre,
                act,
                out,
                resid: x.clone(),
            });
        }
        let (xf, lnf) = layer_norm(&x, &w.lnf_g, &w.lnf_b);
        let logits = xf.dot(&w.unembed);
        Ok(Self { offsets, lens, tokens, layers, lnf, xf, logits, patch_rows })
    }

    pub(crate) fn row(&self, seq: usize, position: usize) -> usize {
        self.offsets[seq] + position
    }

    pub(crate) fn n_rows(&self) -> usize {
        self.tokens.len()
    }

    pub(crate) fn capture(&self, seq: usize, c: CapturePoint) -> Array1<T> {
        self.site_rows(c.layer, c.site).row(self.row(seq, c.position)).to_owned()
    }

    /// Every row of one capture site at `layer`.
    pub(crate) fn site_rows(&self, layer: usize, site: Site) -> &Array2<T> {
        let lc = &self.layers[layer];
        match site {
            Site::MlpIn => &lc.m,
            Site::MlpAct => &lc.act,
            Site::MlpOut => &lc.out,
            Site::Resid => &lc.resid,
        }
    }

    pub(crate) fn logits_row(&self, seq: usize, position: usize) -> ndarray::ArrayView1<'_, T> {
        self.logits.row(self.row(seq, position))
    }

    /// Reverse-mode pass. `dlogits` is the loss gradient on the logits (rows
    /// of the stacked batch); `injections` add loss gradients directly on a
    /// layer's MLP output or on the residual stream after it.
    pub(crate) fn backward(
        &self,
        model: &ModelState<T>,
        dlogits: Option<&Array2<T>>,
        injections: &[SiteGrad<T>],
        opts: GradOptions,
    ) -> Gradients<T> {
        let cfg = &model.config;
        let w = &model.weights;
        let (d, nh) = (cfg.d_model, cfg.n_heads);
        let dh = cfg.head_dim();
        let n = self.n_rows();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut grads = opts.param_grads.then(|| Weights::<T>::zeros(cfg));
        let mut patch_grads: Vec<Option<Array1<T>>> = vec![None; self.patch_rows.len()];

        let mut dx = match dlogits {
            Some(dl) => {
                let dxf = dl.dot(&w.unembed.t());
                if let Some(g) = grads.as_mut() {
                    g.unembed = self.xf.t().dot(dl);
                }
                let (dg, db) = match grads.as_mut() {
                    Some(g) => (Some(&mut g.lnf_g), Some(&mut g.lnf_b)),
                    None => (None, None),
                };
                layer_norm_backward(&dxf, &self.lnf, &w.lnf_g, dg.zip(db))
            }
            None => Array2::zeros((n, d)),
        };

        let grab = |pg: &mut Vec<Option<Array1<T>>>, g: &Array2<T>, layer: usize, site: Site| {
            for (i, &(row, l, s)) in self.patch_rows.iter().enumerate() {
                if l == layer && s == site {
                    pg[i] = Some(g.row(row).to_owned());
                }
            }
        };

        for li in (opts.lowest_layer..cfg.n_layers).rev() {
            let lc = &self.layers[li];
            let lw = &w.layers[li];
            for inj in injections.iter().filter(|j| j.layer == li && j.site == Site::Resid) {
                let mut r = dx.row_mut(inj.row);
                r += &inj.grad;
            }
            grab(&mut patch_grads, &dx, li, Site::Resid);
            let mut d_out_own = None;
            for inj in injections.iter().filter(|j| j.layer == li && j.site == Site::MlpOut) {
                let g = d_out_own.get_or_insert_with(|| dx.clone());
                let mut r = g.row_mut(inj.row);
                r += &inj.grad;
            }
            let d_out = d_out_own.as_ref().unwrap_or(&dx);
            grab(&mut patch_grads, d_out, li, Site::MlpOut);

            // MLP
            let mut d_act = d_out.dot(&lw.w_out.t());
            grab(&mut patch_grads, &d_act, li, Site::MlpAct);
            ndarray::Zip::from(&mut d_act).and(&lc.pre).for_each(|g, &p| *g = *g * gelu_grad(p));
            let d_pre = d_act;
            let d_m = d_pre.dot(&lw.w_in.t());
            grab(&mut patch_grads, &d_m, li, Site::MlpIn);
            let lg = grads.as_mut().map(|g| &mut g.layers[li]);
            let dx_mid = match lg {
                Some(g) => {
                    g.w_out = lc.act.t().dot(d_out);
                    g.w_in = lc.m.t().dot(&d_pre);
                    let dm_ln = layer_norm_backward(&d_m, &lc.ln2, &lw.ln2_g, Some((&mut g.ln2_g, &mut g.ln2_b)));
                    &dx + &dm_ln
                }
                None => &dx + &layer_norm_backward(&d_m, &lc.ln2, &lw.ln2_g, None),
            };

            // attention
            let d_ctx = dx_mid.dot(&lw.w_o.t());
            let mut dq = Array2::<T>::zeros((n, d));
            let mut dk = Array2::<T>::zeros((n, d));
            let mut dv = Array2::<T>::zeros((n, d));
            for (si, &off) in self.offsets.iter().enumerate() {
                let len = self.lens[si];
                for h in 0..nh {
                    let cols = h * dh..(h + 1) * dh;
                    let p = &lc.probs[si * nh + h];
                    let rows = off..off + len;
                    let dch = d_ctx.slice(s![rows.clone(), cols.clone()]);
                    let qh = lc.q.slice(s![rows.clone(), cols.clone()]);
                    let kh = lc.k.slice(s![rows.clone(), cols.clone()]);
                    let vh = lc.v.slice(s![rows.clone(), cols.clone()]);
                    dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dch));
                    let dp = dch.dot(&vh.t());
                    let mut dsc = Array2::<T>::zeros((len, len));
                    for i in 0..len {
                        let mut dot = T::zero();
                        for j in 0..=i {
                            dot = dot + dp[[i, j]] * p[[i, j]];
                        }
                        for j in 0..=i {
                            dsc[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                        }
                    }
                    dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&dsc.dot(&kh));
                    dk.slice_mut(s![rows, cols]).assign(&dsc.t().dot(&qh));
                }
            }
            let da = dq.dot(&lw.w_q.t()) + dk.dot(&lw.w_k.t()) + dv.dot(&lw.w_v.t());
            dx = match grads.as_mut().map(|g| &mut g.layers[li]) {
                Some(g) => {
                    g.w_o = lc.ctx.t().dot(&dx_mid);
                    g.w_q = lc.a.t().dot(&dq);
                    g.w_k = lc.a.t().dot(&dk);
                    g.w_v = lc.a.t().dot(&dv);
                    let d_ln = layer_norm_backward(&da, &lc.ln1, &lw.ln1_g, Some((&mut g.ln1_g, &mut g.ln1_b)));
                    dx_mid + d_ln
                }
                None => dx_mid + layer_norm_backward(&da, &lc.ln1, &lw.ln1_g, None),
            };
        }

        if opts.lowest_layer == 0 {
            if let Some(g) = grads.as_mut() {
                for (si, &off) in self.offsets.iter().enumerate() {
                    for pos in 0..self.lens[si] {
                        let r = off + pos;
                        let t = self.tokens[r] as usize;
                        let mut te = g.tok_emb.row_mut(t);
                        te += &dx.row(r);
                        let mut pe = g.pos_emb.row_mut(pos);
                        pe += &dx.row(r);
                    }
                }
            }
        }

        let patches = patch_grads
            .into_iter()
            .zip(&self.patch_rows)
            .map(|(g, &(_, _, site))| g.unwrap_or_else(|| Array1::zeros(site.width(d, cfg.d_mlp))))
            .collect();
        Gradients { weights: grads, patches }
    }
}

/// Loss gradient injected at `site` of `layer` (`MlpOut` or `Resid`).
#[derive(Debug, Clone)]
pub(crate) struct SiteGrad<T> {
    pub row: usize,
    pub layer: usize,
    pub site: Site,
    pub grad: Array1<T>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GradOptions {
    pub param_grads: bool,
    /// Layers below this index (and the embeddings, unless it is 0) are skipped.
    pub lowest_layer: usize,
}

impl GradOptions {
    pub fn all() -> Self {
        Self { param_grads: true, lowest_layer: 0 }
    }
}

pub(crate) struct Gradients<T> {
    pub weights: Option<Weights<T>>,
    /// Gradient w.r.t. each patch delta, in the order the patches were given.
    pub patches: Vec<Array1<T>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{build_model, ModelConfig, Tokenizer};

    fn small(n_layers: usize) -> ModelState<f64> {
        let tok = Tokenizer::from_symbols((0..10).map(|i| format!("t{i}")));
        let cfg = ModelConfig {
            n_layers,
            d_model: 16,
            d_mlp: 32,
            n_heads: 2,
            vocab_size: 10,
            max_seq_len: 8,
            seed: 3,
        };
        build_model(&cfg, tok).unwrap()
    }

    #[test]
    fn zero_patch_is_bit_identical() {
        let m = small(2);
        let toks = [1, 4, 2, 7];
        let plain = forward(&m, &toks, &[], &[]).unwrap();
        let zero = Patch { layer: 0, position: 2, site: Site::MlpOut, delta: Array1::zeros(16) };
        let patched = forward(&m, &toks, &[], &[zero]).unwrap();
        assert_eq!(plain.logits, patched.logits);
    }

    #[test]
    fn patch_changes_next_layer_resid() {
        let m = small(2);
        let toks = [1, 4, 2, 7];
        let cap = [CapturePoint::new(1, 2, Site::Resid), CapturePoint::new(0, 2, Site::MlpOut)];
        let a = forward(&m, &toks, &cap, &[]).unwrap();
        let delta = Array1::from_elem(16, 0.1);
        let p = Patch { layer: 0, position: 2, site: Site::MlpOut, delta: delta.clone() };
        let b = forward(&m, &toks, &cap, &[p]).unwrap();
        assert_ne!(a.captured[&cap[0]], b.captured[&cap[0]]);
        let diff = &b.captured[&cap[1]] - &a.captured[&cap[1]];
        for (x, y) in diff.iter().zip(delta.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // earlier positions are untouched in a causal model
        assert_eq!(a.logits.row(1), b.logits.row(1));
    }

    #[test]
    fn index_errors() {
        let m = small(2);
        assert!(matches!(
            forward(&m, &[1, 2], &[CapturePoint::new(2, 0, Site::Resid)], &[]),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            forward(&m, &[1, 2], &[CapturePoint::new(0, 2, Site::Resid)], &[]),
            Err(Error::Index(_))
        ));
        assert!(matches!(forward(&m, &[1; 9], &[], &[]), Err(Error::Index(_))));
    }

    #[test]
    fn batched_rows_match_single_runs() {
        let m = small(2);
        let a: &[TokenId] = &[1, 2, 3];
        let b: &[TokenId] = &[4, 5];
        let pass = Pass::run(&m, &[a, b], &[]).unwrap();
        let sa = forward(&m, a, &[], &[]).unwrap();
        let sb = forward(&m, b, &[], &[]).unwrap();
        for p in 0..3 {
            for (x, y) in pass.logits_row(0, p).iter().zip(sa.logits.row(p)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for p in 0..2 {
            for (x, y) in pass.logits_row(1, p).iter().zip(sb.logits.row(p)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn loss_of(m: &ModelState<f64>, seqs: &[&[TokenId]], patches: &[SeqPatch<'_, f64>], inj: &[SiteGrad<f64>]) -> f64 {
        let pass = Pass::run(m, seqs, patches).unwrap();
        let targets = crate::tinylm::train::lm_targets(&pass, seqs);
        let (l, _) = crate::tinylm::cross_entropy(&pass.logits, &targets);
        // linear probe on the residual stream realizes the injected gradient
        let probe: f64 = inj.iter().map(|j| {
            pass.site_rows(j.layer, j.site).row(j.row).dot(&j.grad)
        }).sum();
        l + probe
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let m = small(2);
        let a: &[TokenId] = &[1, 4, 2, 7, 3];
        let b: &[TokenId] = &[5, 0, 9];
        let seqs = [a, b];
        let inj = vec![
            SiteGrad { row: 2, layer: 0, site: Site::Resid, grad: Array1::from_iter((0..16).map(|i| 0.05 * (i as f64 - 7.0))) },
            SiteGrad { row: 6, layer: 1, site: Site::MlpOut, grad: Array1::from_iter((0..16).map(|i| 0.02 * (i as f64 - 3.0))) },
        ];
        let pass = Pass::run(&m, &seqs, &[]).unwrap();
        let targets = crate::tinylm::train::lm_targets(&pass, &seqs);
        let (_, dl) = crate::tinylm::cross_entropy(&pass.logits, &targets);
        let g = pass.backward(&m, Some(&dl), &inj, GradOptions::all()).weights.unwrap();
        let names = crate::tinylm::tensor_shapes(&m.config);
        let gflat = g.flat();
        let n_tensors = gflat.len();
        for ti in 0..n_tensors {
            let len = gflat[ti].len();
            for &j in &[0, len / 3, len / 2, len - 1] {
                let h = 1e-5;
                let mut mp = m.clone();
                mp.weights.flat_mut()[ti][j] += h;
                let mut mm = m.clone();
                mm.weights.flat_mut()[ti][j] -= h;
                let fd = (loss_of(&mp, &seqs, &[], &inj) - loss_of(&mm, &seqs, &[], &inj)) / (2.0 * h);
                let an = gflat[ti][j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-3 || (fd - an).abs() < 1e-9, "{} [{j}]: fd {fd} vs {an}", names[ti].0);
            }
        }
    }

    #[test]
    fn patch_gradients_match_central_differences() {
        let m = small(3);
        let a: &[TokenId] = &[1, 4, 2, 7, 3];
        let seqs = [a];
        let sites = [Site::MlpIn, Site::MlpAct, Site::MlpOut, Site::Resid];
        for (k, &site) in sites.iter().enumerate() {
            let width = site.width(16, 32);
            let patch = Patch { layer: k % 2, position: 2, site, delta: Array1::from_iter((0..width).map(|i| 0.01 * i as f64)) };
            let inj = vec![
                SiteGrad { row: 3, layer: 2, site: Site::Resid, grad: Array1::from_elem(16, 0.3) },
                SiteGrad { row: 4, layer: 1, site: Site::MlpOut, grad: Array1::from_iter((0..16).map(|i| 0.1 - 0.01 * i as f64)) },
            ];
            let sp = [SeqPatch { seq: 0, patch: &patch }];
            let pass = Pass::run(&m, &seqs, &sp).unwrap();
            let targets = crate::tinylm::train::lm_targets(&pass, &seqs);
            let (_, dl) = crate::tinylm::cross_entropy(&pass.logits, &targets);
            let opts = GradOptions { param_grads: false, lowest_layer: patch.layer };
            let g = pass.backward(&m, Some(&dl), &inj, opts);
            assert!(g.weights.is_none());
            for j in [0, width / 2, width - 1] {
                let h = 1e-6;
                let mut pp = patch.clone();
                pp.delta[j] += h;
                let mut pm = patch.clone();
                pm.delta[j] -= h;
                let lp = loss_of(&m, &seqs, &[SeqPatch { seq: 0, patch: &pp }], &inj);
                let lm = loss_of(&m, &seqs, &[SeqPatch { seq: 0, patch: &pm }], &inj);
                let fd = (lp - lm) / (2.0 * h);
                let an = g.patches[0][j];
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-4), "{site:?}[{j}]: fd {fd} vs {an}");
            }
        }
    }
}
