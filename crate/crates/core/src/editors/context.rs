// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tokenized prompts, prefixes and keys shared by the value-based editors.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::cholesky_solve;
use crate::error::{Error, Result};
use crate::factworld::EditRequest;
use crate::scalar::Scalar;
use crate::tinylm::ops::log_softmax;
use crate::tinylm::{generate_ids, DecodeConfig, ModelState, Pass, Patch, SeqPatch, Site, TokenId, TokenSeq};

/// Position of the last token of the last occurrence of `subject` in `tokens`.
pub fn subject_last_position(tokens: &[TokenId], subject: &[TokenId]) -> Result<usize> {
    if subject.is_empty() || subject.len() > tokens.len() {
        return Err(Error::Span("subject does not fit in the prompt".into()));
    }
    (0..=tokens.len() - subject.len())
        .rev()
        .find(|&i| &tokens[i..i + subject.len()] == subject)
        .map(|i| i + subject.len() - 1)
        .ok_or_else(|| Error::Span("subject tokens do not occur in the prompt".into()))
}

/// `n` context prefixes: the empty prefix followed by short model samples
/// ending in a period, each started from a random capitalized symbol.
pub fn sample_prefixes<T: Scalar>(model: &ModelState<T>, n: usize, len: usize, seed: u64) -> Result<Vec<String>> {
    let mut out = vec![String::new()];
    if n <= 1 {
        return Ok(out);
    }
    let tok = &model.tokenizer;
    let mut starters: Vec<TokenId> = tok
        .symbols()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.starts_with(|c: char| c.is_ascii_uppercase()))
        .map(|(i, _)| i as TokenId)
        .collect();
    if starters.is_empty() {
        starters = (0..tok.len() as TokenId).collect();
    }
    let period = tok.id(".");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while out.len() < n {
        let start = *starters.choose(&mut rng).expect("tokenizer is not empty");
        let cfg = DecodeConfig { max_len: len, temperature: 1.0, seed: rng.gen(), stop: Some(".".into()) };
        let mut ids = vec![start];
        ids.extend(generate_ids(model, &ids, &cfg)?);
        if let Some(p) = period {
            if ids.last() != Some(&p) {
                ids.push(p);
            }
        }
        out.push(tok.detokenize(&ids)?);
    }
    Ok(out)
}

pub(crate) fn prefixed(prefix: &str, prompt: &str) -> String {
    if prefix.is_empty() {
        prompt.to_string()
    } else {
        format!("{prefix} {prompt}")
    }
}

/// Seed of the prefixes drawn for one edit.
pub(crate) fn prefix_seed(plan_seed: u64, edit_id: usize) -> u64 {
    plan_seed ^ (edit_id as u64 + 1).wrapping_mul(0xa076_1d64_78bd_642f)
}

/// Mean MLP key at the subject's last token over the prefixed prompts
/// `x_j ⊕ p(s, r)`.
pub fn compute_key<T: Scalar>(model: &ModelState<T>, edit: &EditRequest, layer: usize, prefixes: &[String]) -> Result<Array1<T>> {
    let subject = model.tokenizer.tokenize(&edit.subject)?;
    let prompts = prefixes
        .iter()
        .map(|p| {
            let t = model.tokenizer.tokenize(&prefixed(p, &edit.prompt))?;
            let pos = subject_last_position(&t, &subject)?;
            Ok((t, pos))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_key(model, &prompts, layer)
}

pub(crate) fn mean_key<T: Scalar>(model: &ModelState<T>, prompts: &[(TokenSeq, usize)], layer: usize) -> Result<Array1<T>> {
    if prompts.is_empty() {
        return Err(Error::Argument("at least one prefix is required".into()));
    }
    if layer >= model.config.n_layers {
        return Err(Error::Index(format!("layer {layer} outside model")));
    }
    let seqs: Vec<&[TokenId]> = prompts.iter().map(|(t, _)| t.as_slice()).collect();
    let pass = Pass::run(model, &seqs, &[])?;
    let acts = pass.site_rows(layer, Site::MlpAct);
    let mut k = Array1::<T>::zeros(model.config.d_mlp);
    for (si, (_, pos)) in prompts.iter().enumerate() {
        k += &acts.row(pass.row(si, *pos));
    }
    Ok(k / T::of(prompts.len() as f64))
}

/// A teacher-forced optimization sequence: `prompt ⊕ answer[..-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptSequence {
    pub tokens: TokenSeq,
    pub prompt_len: usize,
    pub subject_pos: usize,
    pub answer: TokenSeq,
    /// Answer is the edit target.
    pub rewrite: bool,
}

impl OptSequence {
    fn new(prompt: TokenSeq, subject_pos: usize, answer: TokenSeq, rewrite: bool) -> Result<Self> {
        if answer.is_empty() {
            return Err(Error::Argument("answer must be non-empty".into()));
        }
        let prompt_len = prompt.len();
        let mut tokens = prompt;
        tokens.extend_from_slice(&answer[..answer.len() - 1]);
        Ok(Self { tokens, prompt_len, subject_pos, answer, rewrite })
    }
}

/// Everything value optimization needs about one edit at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EditContext {
    pub edit_id: usize,
    pub layer: usize,
    pub subject: TokenSeq,
    pub prompt: TokenSeq,
    pub subject_pos: usize,
    pub target: TokenSeq,
    pub prefixes: Vec<String>,
    /// `(x_j ⊕ p(s, r), subject position)`.
    pub key_prompts: Vec<(TokenSeq, usize)>,
    pub sequences: Vec<OptSequence>,
    pub footprint: Option<Footprint>,
}

/// Effect of a rank-one insertion of `(k*, v*)` on the MLP output at any
/// position with key `k`: `Δ = (v* − W k*) · uᵀk` with `u = C⁻¹k* / (k*ᵀC⁻¹k*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    /// `v − W k*`, so that `v* − W k* = offset + h`.
    pub offset: Vec<f64>,
    pub u: Vec<f64>,
    /// `uᵀk` at every position of every optimization sequence.
    pub coefs: Vec<Vec<f64>>,
}

impl EditContext {
    pub fn new<T: Scalar>(model: &ModelState<T>, edit: &EditRequest, layer: usize, prefixes: &[String]) -> Result<Self> {
        if prefixes.is_empty() {
            return Err(Error::Argument("at least one prefix is required".into()));
        }
        if layer >= model.config.n_layers {
            return Err(Error::Index(format!("layer {layer} outside model of {} layers", model.config.n_layers)));
        }
        let tok = &model.tokenizer;
        let subject = tok.tokenize(&edit.subject)?;
        let prompt = tok.tokenize(&edit.prompt)?;
        let subject_pos = subject_last_position(&prompt, &subject)?;
        let target = tok.tokenize(&edit.target)?;
        let mut key_prompts = Vec::with_capacity(prefixes.len());
        let mut sequences = Vec::new();
        for p in prefixes {
            let t = tok.tokenize(&prefixed(p, &edit.prompt))?;
            let pos = subject_last_position(&t, &subject)?;
            sequences.push(OptSequence::new(t.clone(), pos, target.clone(), true)?);
            key_prompts.push((t, pos));
        }
        for (i, extra) in edit.opt_prompts.iter().enumerate() {
            let t = tok.tokenize(&prefixed(&prefixes[i % prefixes.len()], &extra.prompt))?;
            let pos = subject_last_position(&t, &subject)?;
            let answer = tok.tokenize(&extra.answer)?;
            sequences.push(OptSequence::new(t, pos, answer, extra.answer == edit.target)?);
        }
        Ok(Self {
            edit_id: edit.id,
            layer,
            subject,
            prompt,
            subject_pos,
            target,
            prefixes: prefixes.to_vec(),
            key_prompts,
            sequences,
            footprint: None,
        })
    }

    /// Switches value optimization to the footprint of the rank-one update
    /// at `self.layer` under the covariance factor `c_chol`.
    pub fn with_footprint<T: Scalar>(mut self, model: &ModelState<T>, c_chol: &Array2<T>) -> Result<Self> {
        let k = self.key(model, self.layer)?;
        let u = cholesky_solve(c_chol, k.view().insert_axis(ndarray::Axis(1))).column(0).to_owned();
        let denom = u.dot(&k);
        if !(denom.f64() > 0.0) {
            return Err(Error::SingularKey(denom.f64()));
        }
        let u = u / denom;
        let v = self.capture(model, self.layer, Site::MlpOut)?;
        let offset = v - k.dot(&model.weights.layers[self.layer].w_out);
        let seqs: Vec<&[TokenId]> = self.sequences.iter().map(|s| s.tokens.as_slice()).collect();
        let coefs = key_coefs(model, &seqs, self.layer, &u)?;
        self.footprint = Some(Footprint {
            offset: offset.iter().map(|x| x.f64()).collect(),
            u: u.iter().map(|x| x.f64()).collect(),
            coefs,
        });
        Ok(self)
    }

    pub fn key<T: Scalar>(&self, model: &ModelState<T>, layer: usize) -> Result<Array1<T>> {
        mean_key(model, &self.key_prompts, layer)
    }

    /// Capture at the subject's last token of the unprefixed prompt.
    pub fn capture<T: Scalar>(&self, model: &ModelState<T>, layer: usize, site: Site) -> Result<Array1<T>> {
        let pass = Pass::run(model, &[&self.prompt], &[])?;
        Ok(pass.site_rows(layer, site).row(self.subject_pos).to_owned())
    }

    /// Runs every optimization sequence (then `extra`) with `h` added to the
    /// MLP output at `self.layer` and the subject position of each sequence,
    /// or with the update footprint of `h` at every position. Returns the pass
    /// and the factor by which each patch scales `h`.
    pub(crate) fn patched_pass<T: Scalar>(
        &self,
        model: &ModelState<T>,
        h: &Array1<T>,
        extra: &[(&[TokenId], usize)],
    ) -> Result<(Pass<T>, Vec<T>)> {
        let mut seqs: Vec<&[TokenId]> = self.sequences.iter().map(|s| s.tokens.as_slice()).collect();
        seqs.extend(extra.iter().map(|(t, _)| *t));
        let mut owners = Vec::new();
        let mut patches = Vec::new();
        let mut scales = Vec::new();
        match &self.footprint {
            None => {
                let positions = self.sequences.iter().map(|s| s.subject_pos).chain(extra.iter().map(|(_, p)| *p));
                for (seq, position) in positions.enumerate() {
                    owners.push(seq);
                    patches.push(Patch { layer: self.layer, position, site: Site::MlpOut, delta: h.clone() });
                    scales.push(T::one());
                }
            }
            Some(f) => {
                let u = Array1::from_iter(f.u.iter().map(|&x| T::of(x)));
                let extra_coefs = if extra.is_empty() {
                    Vec::new()
                } else {
                    key_coefs(model, &seqs[self.sequences.len()..], self.layer, &u)?
                };
                let base = Array1::from_iter(f.offset.iter().map(|&x| T::of(x))) + h;
                for (seq, coefs) in f.coefs.iter().chain(&extra_coefs).enumerate() {
                    for (position, &c) in coefs.iter().enumerate() {
                        owners.push(seq);
                        patches.push(Patch { layer: self.layer, position, site: Site::MlpOut, delta: &base * T::of(c) });
                        scales.push(T::of(c));
                    }
                }
            }
        }
        let bound: Vec<SeqPatch<'_, T>> = owners.iter().zip(&patches).map(|(&seq, patch)| SeqPatch { seq, patch }).collect();
        Ok((Pass::run(model, &seqs, &bound)?, scales))
    }
}

/// `uᵀk` at every position of every sequence, keys read at `layer`.
fn key_coefs<T: Scalar>(model: &ModelState<T>, seqs: &[&[TokenId]], layer: usize, u: &Array1<T>) -> Result<Vec<Vec<f64>>> {
    let pass = Pass::run(model, seqs, &[])?;
    let acts = pass.site_rows(layer, Site::MlpAct);
    Ok(seqs
        .iter()
        .enumerate()
        .map(|(si, t)| (0..t.len()).map(|p| acts.row(pass.row(si, p)).dot(u).f64()).collect())
        .collect())
}

/// New-knowledge loss `−mean_j log P(answer_j | sequence_j)` read off a patched pass.
pub(crate) struct NewKnowledgeTerms<T> {
    pub loss: f64,
    /// Loss gradient on the logits of the whole pass.
    pub dlogits: Array2<T>,
    /// Geometric mean over rewrite sequences of the joint target probability.
    pub target_prob: f64,
}

pub(crate) fn new_knowledge_terms<T: Scalar>(ctx: &EditContext, pass: &Pass<T>) -> NewKnowledgeTerms<T> {
    let mut dlogits = Array2::<T>::zeros(pass.logits.dim());
    let n = ctx.sequences.len() as f64;
    let inv = T::of(1.0 / n);
    let mut loss = 0.0;
    let mut rewrite_lp = 0.0;
    let mut n_rewrite = 0usize;
    for (si, s) in ctx.sequences.iter().enumerate() {
        let mut lp = 0.0;
        for (i, &t) in s.answer.iter().enumerate() {
            let row = pass.row(si, s.prompt_len - 1 + i);
            let ls = log_softmax(pass.logits.row(row));
            lp += ls[t as usize].f64();
            let mut g = dlogits.row_mut(row);
            for (gj, lj) in g.iter_mut().zip(ls.iter()) {
                *gj += lj.exp() * inv;
            }
            g[t as usize] -= inv;
        }
        loss -= lp / n;
        if s.rewrite {
            rewrite_lp += lp;
            n_rewrite += 1;
        }
    }
    let target_prob = if n_rewrite == 0 { 0.0 } else { (rewrite_lp / n_rewrite as f64).exp() };
    NewKnowledgeTerms { loss, dlogits, target_prob }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editors::tests::{toy_edit, toy_model};
    use crate::tinylm::{forward, CapturePoint};

    #[test]
    fn subject_span() {
        assert_eq!(subject_last_position(&[1, 2, 3, 1, 2, 5], &[1, 2]).unwrap(), 4);
        assert_eq!(subject_last_position(&[7, 1], &[1]).unwrap(), 1);
        assert!(matches!(subject_last_position(&[1, 3], &[1, 2]), Err(Error::Span(_))));
        assert!(matches!(subject_last_position(&[1], &[1, 2]), Err(Error::Span(_))));
    }

    #[test]
    fn key_with_empty_prefix_is_single_capture() {
        let m = toy_model();
        let e = toy_edit(&m);
        let k = compute_key(&m, &e, 1, &[String::new()]).unwrap();
        let t = m.tokenizer.tokenize(&e.prompt).unwrap();
        let pos = subject_last_position(&t, &m.tokenizer.tokenize(&e.subject).unwrap()).unwrap();
        let cp = CapturePoint::new(1, pos, Site::MlpAct);
        let direct = forward(&m, &t, &[cp], &[]).unwrap().captured[&cp].clone();
        assert_eq!(k, direct);
    }

    #[test]
    fn key_is_mean_of_captures() {
        let m = toy_model();
        let e = toy_edit(&m);
        let prefixes = sample_prefixes(&m, 3, 3, 5).unwrap();
        assert_eq!(prefixes[0], "");
        assert!(prefixes[1..].iter().all(|p| p.ends_with('.')));
        let k = compute_key(&m, &e, 0, &prefixes).unwrap();
        let subject = m.tokenizer.tokenize(&e.subject).unwrap();
        let mut hand = Array1::<f64>::zeros(m.config.d_mlp);
        for p in &prefixes {
            let t = m.tokenizer.tokenize(&prefixed(p, &e.prompt)).unwrap();
            let cp = CapturePoint::new(0, subject_last_position(&t, &subject).unwrap(), Site::MlpAct);
            hand += &forward(&m, &t, &[cp], &[]).unwrap().captured[&cp];
        }
        hand /= 3.0;
        approx::assert_abs_diff_eq!(k, hand, epsilon = 1e-12);

        let mut rev = prefixes.clone();
        rev.reverse();
        approx::assert_abs_diff_eq!(compute_key(&m, &e, 0, &rev).unwrap(), k, epsilon = 1e-12);
        let one = vec![prefixes[1].clone(); 4];
        approx::assert_abs_diff_eq!(
            compute_key(&m, &e, 0, &one).unwrap(),
            compute_key(&m, &e, 0, &prefixes[1..2]).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn missing_subject_is_span_error() {
        let m = toy_model();
        let mut e = toy_edit(&m);
        e.prompt = "w3 w4".into();
        assert!(matches!(compute_key(&m, &e, 0, &[String::new()]), Err(Error::Span(_))));
    }

    #[test]
    fn prefixes_are_deterministic() {
        let m = toy_model();
        assert_eq!(sample_prefixes(&m, 5, 4, 1).unwrap(), sample_prefixes(&m, 5, 4, 1).unwrap());
        assert_eq!(sample_prefixes(&m, 1, 4, 1).unwrap(), vec![String::new()]);
    }
}
