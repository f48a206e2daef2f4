// SPDX-License-Identifier: MIT OR Apache-2.0

//! Teacher-forced answer scoring and text generation.

use ndarray::Array1;
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::Pass;
use super::model::ModelState;
use super::ops::{log_softmax, softmax};
use super::tokenizer::{TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Log-probability of a continuation given a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    /// `Σ log P(token_i | prefix)`.
    pub logprob: f64,
    pub n_tokens: usize,
}

impl AnswerScore {
    /// Joint probability of the whole continuation.
    pub fn prob(&self) -> f64 {
        self.logprob.exp()
    }

    /// Length-normalized probability `exp(mean log P)`.
    pub fn normalized(&self) -> f64 {
        (self.logprob / self.n_tokens as f64).exp()
    }
}

pub fn sequence_logprob<T: Scalar>(
    model: &ModelState<T>,
    prompt: &[TokenId],
    continuation: &[TokenId],
) -> Result<AnswerScore> {
    Ok(score_continuations(model, prompt, &[continuation])?[0])
}

/// Scores several continuations of one prompt in a single batched pass.
pub fn score_continuations<T: Scalar>(
    model: &ModelState<T>,
    prompt: &[TokenId],
    continuations: &[&[TokenId]],
) -> Result<Vec<AnswerScore>> {
    if prompt.is_empty() {
        return Err(Error::Argument("prompt must contain at least one token".into()));
    }
    let mut seqs: Vec<TokenSeq> = Vec::with_capacity(continuations.len());
    for c in continuations {
        if c.is_empty() {
            return Err(Error::Argument("continuation must be non-empty".into()));
        }
        let mut s = prompt.to_vec();
        s.extend_from_slice(&c[..c.len() - 1]);
        seqs.push(s);
    }
    let views: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
    let pass = Pass::run(model, &views, &[])?;
    Ok(continuations
        .iter()
        .enumerate()
        .map(|(si, c)| {
            let logprob = c
                .iter()
                .enumerate()
                .map(|(i, &t)| log_softmax(pass.logits_row(si, prompt.len() - 1 + i))[t as usize].f64())
                .sum();
            AnswerScore { logprob, n_tokens: c.len() }
        })
        .collect())
}

/// Next-token distribution after the last prompt token.
pub fn next_token_distribution<T: Scalar>(model: &ModelState<T>, prompt: &[TokenId]) -> Result<Array1<T>> {
    let pass = Pass::run(model, &[prompt], &[])?;
    Ok(softmax(pass.logits_row(0, prompt.len() - 1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub max_len: usize,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub seed: u64,
    /// Stop after emitting this symbol.
    pub stop: Option<String>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { max_len: 8, temperature: 0.0, seed: 0, stop: Some(".".into()) }
    }
}

/// Generates token ids after `prompt`.
pub fn generate_ids<T: Scalar>(model: &ModelState<T>, prompt: &[TokenId], cfg: &DecodeConfig) -> Result<TokenSeq> {
    let stop = cfg.stop.as_deref().and_then(|s| model.tokenizer.id(s));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < cfg.max_len && seq.len() < model.config.max_seq_len {
        let pass = Pass::run(model, &[&seq], &[])?;
        let logits = pass.logits_row(0, seq.len() - 1);
        // never emit ids that have no symbol
        let n_sym = model.tokenizer.len();
        let next = if cfg.temperature <= 0.0 {
            let mut best = 0;
            for i in 1..n_sym {
                if logits[i] > logits[best] {
                    best = i;
                }
            }
            best as TokenId
        } else {
            let scaled: Vec<f64> = logits.iter().take(n_sym).map(|&l| l.f64() / cfg.temperature).collect();
            let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();
            WeightedIndex::new(&weights)
                .map_err(|e| Error::Divergence(format!("sampling weights: {e}")))?
                .sample(&mut rng) as TokenId
        };
        out.push(next);
        seq.push(next);
        if Some(next) == stop {
            break;
        }
    }
    Ok(out)
}

/// Generates a text continuation of `prompt`.
pub fn generate<T: Scalar>(model: &ModelState<T>, prompt: &str, cfg: &DecodeConfig) -> Result<String> {
    let ids = model.tokenizer.tokenize(prompt)?;
    if ids.is_empty() {
        return Err(Error::Argument("prompt must contain at least one token".into()));
    }
    let out = generate_ids(model, &ids, cfg)?;
    model.tokenizer.detokenize(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{build_model, ModelConfig, Tokenizer};

    fn small() -> ModelState<f64> {
        let tok = Tokenizer::from_symbols(["a", "b", "c", "d", "."]);
        let cfg = ModelConfig { n_layers: 2, d_model: 16, d_mlp: 32, n_heads: 2, vocab_size: 5, max_seq_len: 12, seed: 9 };
        build_model(&cfg, tok).unwrap()
    }

    /// Model whose every output distribution is uniform over `vocab` tokens.
    fn rigged(vocab: usize) -> ModelState<f64> {
        let tok = Tokenizer::from_symbols((0..vocab).map(|i| format!("s{i}")));
        let cfg = ModelConfig { n_layers: 1, d_model: 8, d_mlp: 8, n_heads: 1, vocab_size: vocab, max_seq_len: 8, seed: 0 };
        let mut m = build_model(&cfg, tok).unwrap();
        m.weights.unembed.fill(0.0);
        m
    }

    #[test]
    fn single_token_equals_softmax() {
        let m = small();
        let p = next_token_distribution(&m, &[0, 1]).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-12);
        for t in 0..5u32 {
            let s = sequence_logprob(&m, &[0, 1], &[t]).unwrap();
            assert!((s.normalized() - p[t as usize]).abs() < 1e-12);
            assert!((s.prob() - p[t as usize]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_halves() {
        let m = rigged(2);
        let s = sequence_logprob(&m, &[0], &[1, 0]).unwrap();
        assert!((s.prob() - 0.25).abs() < 1e-12);
        assert!((s.normalized() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_continuation_is_error() {
        assert!(matches!(sequence_logprob(&small(), &[0], &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn deterministic_scores() {
        let m = small();
        let a = sequence_logprob(&m, &[0, 1, 2], &[3, 1]).unwrap();
        let b = sequence_logprob(&m, &[0, 1, 2], &[3, 1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_generation() {
        let m = small();
        let zero = DecodeConfig { max_len: 0, ..Default::default() };
        assert_eq!(generate(&m, "a b", &zero).unwrap(), "");
        let cfg = DecodeConfig { max_len: 5, stop: None, ..Default::default() };
        let g1 = generate(&m, "a b", &cfg).unwrap();
        let g2 = generate(&m, "a b", &cfg).unwrap();
        assert_eq!(g1, g2);
        // the first greedy token is the best single-token continuation
        let ids = generate_ids(&m, &[0, 1], &cfg).unwrap();
        let best = (0..5u32)
            .max_by(|&x, &y| {
                let sx = sequence_logprob(&m, &[0, 1], &[x]).unwrap().logprob;
                let sy = sequence_logprob(&m, &[0, 1], &[y]).unwrap().logprob;
                sx.partial_cmp(&sy).unwrap()
            })
            .unwrap();
        assert_eq!(ids[0], best);
        assert!(matches!(generate(&m, "a zzz", &cfg), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn sampling_is_seeded() {
        let m = small();
        let cfg = DecodeConfig { max_len: 6, temperature: 1.0, seed: 4, stop: None };
        assert_eq!(generate(&m, "a", &cfg).unwrap(), generate(&m, "a", &cfg).unwrap());
    }
}
