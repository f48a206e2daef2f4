// SPDX-License-Identifier: MIT OR Apache-2.0

//! From-scratch pretraining with Adam.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{GradOptions, Pass};
use super::model::{ModelState, Weights};
use super::ops::softmax;
use super::tokenizer::{TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup steps; the rate then decays on a cosine to `lr · final_lr_frac`.
    pub warmup: usize,
    pub final_lr_frac: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Lines of the probe set used to report initial and final loss.
    pub probe_lines: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 48,
            lr: 3e-3,
            warmup: 100,
            final_lr_frac: 0.05,
            grad_clip: 1.0,
            seed: 0,
            probe_lines: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Next-token targets for a batch pass: `(row, target)` for every position
/// that has a successor.
pub(crate) fn lm_targets<T: Scalar>(pass: &Pass<T>, seqs: &[&[TokenId]]) -> Vec<(usize, TokenId)> {
    let mut out = Vec::new();
    for (si, s) in seqs.iter().enumerate() {
        for p in 0..s.len().saturating_sub(1) {
            out.push((pass.row(si, p), s[p + 1]));
        }
    }
    out
}

/// Mean cross entropy over `targets` and its gradient w.r.t. the logits.
pub(crate) fn cross_entropy<T: Scalar>(logits: &Array2<T>, targets: &[(usize, TokenId)]) -> (f64, Array2<T>) {
    let mut grad = Array2::<T>::zeros(logits.dim());
    if targets.is_empty() {
        return (0.0, grad);
    }
    let inv = T::of(1.0 / targets.len() as f64);
    let mut loss = 0.0;
    for &(row, t) in targets {
        let p = softmax(logits.row(row));
        loss -= p[t as usize].f64().max(f64::MIN_POSITIVE).ln();
        let mut g = grad.row_mut(row);
        g.scaled_add(inv, &p);
        g[t as usize] = g[t as usize] - inv;
    }
    (loss / targets.len() as f64, grad)
}

/// Mean next-token loss over the given sequences.
pub fn mean_lm_loss<T: Scalar>(model: &ModelState<T>, seqs: &[TokenSeq]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(64) {
        let views: Vec<&[TokenId]> = chunk.iter().map(Vec::as_slice).collect();
        let pass = Pass::run(model, &views, &[])?;
        let targets = lm_targets(&pass, &views);
        let (l, _) = cross_entropy(&pass.logits, &targets);
        total += l * targets.len() as f64;
        count += targets.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Adam state over a full weight set.
pub(crate) struct Adam<T> {
    m: Weights<T>,
    v: Weights<T>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(template: &Weights<T>) -> Self {
        let zero = |w: &Weights<T>| {
            let mut z = w.clone();
            for s in z.flat_mut() {
                s.fill(T::zero());
            }
            z
        };
        Self { m: zero(template), v: zero(template), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update; `mask[i]` selects which tensors (in flat order) may move.
    pub fn step(&mut self, params: &mut Weights<T>, grads: &Weights<T>, lr: f64, mask: Option<&[bool]>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let step = T::of(lr * bc2.sqrt() / bc1);
        let (b1t, b2t, eps) = (T::of(b1), T::of(b2), T::of(self.eps));
        let (ob1, ob2) = (T::one() - b1t, T::one() - b2t);
        for (i, (((p, g), m), v)) in params
            .flat_mut()
            .into_iter()
            .zip(grads.flat())
            .zip(self.m.flat_mut())
            .zip(self.v.flat_mut())
            .enumerate()
        {
            if mask.is_some_and(|mk| !mk[i]) {
                continue;
            }
            for j in 0..p.len() {
                m[j] = b1t * m[j] + ob1 * g[j];
                v[j] = b2t * v[j] + ob2 * g[j] * g[j];
                p[j] = p[j] - step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
pub(crate) fn clip_grad_norm<T: Scalar>(grads: &mut Weights<T>, max_norm: f64) -> f64 {
    let norm = grads
        .flat()
        .iter()
        .flat_map(|s| s.iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for sl in grads.flat_mut() {
            for x in sl.iter_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = (cfg.steps - cfg.warmup).max(1) as f64;
    let progress = (step - cfg.warmup) as f64 / span;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr * (cfg.final_lr_frac + (1.0 - cfg.final_lr_frac) * cos)
}

/// Trains `model` in place on corpus lines.
pub fn train<T: Scalar, S: AsRef<str>>(
    model: &mut ModelState<T>,
    lines: &[S],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if lines.is_empty() {
        return Err(Error::Argument("training corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let seqs: Vec<TokenSeq> = lines
        .iter()
        .map(|l| model.tokenizer.tokenize(l.as_ref()))
        .collect::<Result<_>>()?;
    if let Some(s) = seqs.iter().find(|s| s.len() > model.config.max_seq_len) {
        return Err(Error::Config(format!(
            "corpus line of {} tokens exceeds max_seq_len {}",
            s.len(),
            model.config.max_seq_len
        )));
    }
    let probe: Vec<TokenSeq> = seqs.iter().take(cfg.probe_lines.max(1)).cloned().collect();
    let initial_probe_loss = mean_lm_loss(model, &probe)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(&model.weights);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch: Vec<&[TokenId]> = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(seqs.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&seqs[order[cursor]]);
            cursor += 1;
        }
        let pass = Pass::run(model, &batch, &[])?;
        let targets = lm_targets(&pass, &batch);
        let (loss, dlogits) = cross_entropy(&pass.logits, &targets);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("training loss is {loss} at step {step}")));
        }
        let mut grads = pass
            .backward(model, Some(&dlogits), &[], GradOptions::all())
            .weights
            .expect("parameter gradients requested");
        clip_grad_norm(&mut grads, cfg.grad_clip);
        adam.step(&mut model.weights, &grads, lr_at(cfg, step), None);
        losses.push(loss);
    }
    let final_probe_loss = mean_lm_loss(model, &probe)?;
    Ok(TrainReport { initial_probe_loss, final_probe_loss, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{build_model, ModelConfig, Tokenizer};

    fn setup() -> (ModelState<f32>, Vec<String>) {
        let lines: Vec<String> = vec![
            "alpha lives in beta .".into(),
            "gamma lives in delta .".into(),
            "beta is near delta .".into(),
        ];
        let tok = Tokenizer::from_texts(lines.iter().map(String::as_str));
        let cfg = ModelConfig { n_layers: 2, d_model: 16, d_mlp: 32, n_heads: 2, vocab_size: 16, max_seq_len: 8, seed: 5 };
        (build_model(&cfg, tok).unwrap(), lines)
    }

    #[test]
    fn zero_steps_is_noop() {
        let (mut m, lines) = setup();
        let before = m.clone();
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        let r = train(&mut m, &lines, &cfg).unwrap();
        assert_eq!(m, before);
        assert_eq!(r.initial_probe_loss, r.final_probe_loss);
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let cfg = TrainConfig { steps: 60, batch_size: 3, lr: 1e-2, warmup: 5, ..Default::default() };
        let (mut a, lines) = setup();
        let ra = train(&mut a, &lines, &cfg).unwrap();
        assert!(ra.final_probe_loss < ra.initial_probe_loss);
        let (mut b, _) = setup();
        let rb = train(&mut b, &lines, &cfg).unwrap();
        assert_eq!(ra.final_probe_loss, rb.final_probe_loss);
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_symbol_is_rejected() {
        let (mut m, _) = setup();
        let cfg = TrainConfig { steps: 1, ..Default::default() };
        assert!(matches!(train(&mut m, &["alpha flies ."], &cfg), Err(Error::Vocabulary(_))));
        assert!(matches!(train::<f32, &str>(&mut m, &[], &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = ndarray::array![[0.2f64, -0.3, 1.0], [0.0, 0.5, 0.1]];
        let t = [(0usize, 2u32), (1, 0)];
        let (l, g) = cross_entropy(&logits, &t);
        for i in 0..2 {
            for j in 0..3 {
                let mut p = logits.clone();
                p[[i, j]] += 1e-6;
                let mut m = logits.clone();
                m[[i, j]] -= 1e-6;
                let fd = (cross_entropy(&p, &t).0 - cross_entropy(&m, &t).0) / 2e-6;
                assert!((fd - g[[i, j]]).abs() < 1e-8);
            }
        }
        assert!(l > 0.0);
    }
}
