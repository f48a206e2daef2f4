// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weights and construction of the decoder-only transformer.
//!
//! Linear maps use the row-vector convention `y = x · W`, so the MLP output
//! projection `w_out` of every layer has shape `d_mlp × d_model`.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_o: Array2<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
    /// MLP input projection, `d_model × d_mlp`.
    pub w_in: Array2<T>,
    /// MLP output projection, `d_mlp × d_model`.
    pub w_out: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub tok_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_g: Array1<T>,
    pub lnf_b: Array1<T>,
    /// `d_model × vocab`.
    pub unembed: Array2<T>,
}

/// Shape of every named tensor, in canonical order.
pub fn tensor_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, m, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![cfg.max_seq_len, d]),
    ];
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        out.extend([
            (p("ln1_g"), vec![d]),
            (p("ln1_b"), vec![d]),
            (p("w_q"), vec![d, d]),
            (p("w_k"), vec![d, d]),
            (p("w_v"), vec![d, d]),
            (p("w_o"), vec![d, d]),
            (p("ln2_g"), vec![d]),
            (p("ln2_b"), vec![d]),
            (p("w_in"), vec![d, m]),
            (p("w_out"), vec![m, d]),
        ]);
    }
    out.extend([
        ("lnf_g".to_string(), vec![d]),
        ("lnf_b".to_string(), vec![d]),
        ("unembed".to_string(), vec![d, v]),
    ]);
    out
}

impl<T: Scalar> LayerWeights<T> {
    fn flat(&self) -> [&[T]; 10] {
        [
            slice(&self.ln1_g),
            slice(&self.ln1_b),
            slice2(&self.w_q),
            slice2(&self.w_k),
            slice2(&self.w_v),
            slice2(&self.w_o),
            slice(&self.ln2_g),
            slice(&self.ln2_b),
            slice2(&self.w_in),
            slice2(&self.w_out),
        ]
    }

    fn flat_mut(&mut self) -> [&mut [T]; 10] {
        [
            slice_mut(&mut self.ln1_g),
            slice_mut(&mut self.ln1_b),
            slice2_mut(&mut self.w_q),
            slice2_mut(&mut self.w_k),
            slice2_mut(&mut self.w_v),
            slice2_mut(&mut self.w_o),
            slice_mut(&mut self.ln2_g),
            slice_mut(&mut self.ln2_b),
            slice2_mut(&mut self.w_in),
            slice2_mut(&mut self.w_out),
        ]
    }
}

fn slice<T>(a: &Array1<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}
fn slice2<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}
fn slice_mut<T>(a: &mut Array1<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}
fn slice2_mut<T>(a: &mut Array2<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}

impl<T: Scalar> Weights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, m, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size);
        let layer = || LayerWeights {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            w_o: Array2::zeros((d, d)),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w_in: Array2::zeros((d, m)),
            w_out: Array2::zeros((m, d)),
        };
        Self {
            tok_emb: Array2::zeros((v, d)),
            pos_emb: Array2::zeros((cfg.max_seq_len, d)),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            unembed: Array2::zeros((d, v)),
        }
    }

    /// All tensors as flat slices, in the order of [`tensor_shapes`].
    pub fn flat(&self) -> Vec<&[T]> {
        let mut out = vec![slice2(&self.tok_emb), slice2(&self.pos_emb)];
        for l in &self.layers {
            out.extend(l.flat());
        }
        out.extend([slice(&self.lnf_g), slice(&self.lnf_b), slice2(&self.unembed)]);
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![slice2_mut(&mut self.tok_emb), slice2_mut(&mut self.pos_emb)];
        for l in &mut self.layers {
            out.extend(l.flat_mut());
        }
        out.extend([
            slice_mut(&mut self.lnf_g),
            slice_mut(&mut self.lnf_b),
            slice2_mut(&mut self.unembed),
        ]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.flat().iter().map(|s| s.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        let c1 = |a: &Array1<T>| a.mapv(|x| U::of(x.f64()));
        let c2 = |a: &Array2<T>| a.mapv(|x| U::of(x.f64()));
        Weights {
            tok_emb: c2(&self.tok_emb),
            pos_emb: c2(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_g: c1(&l.ln1_g),
                    ln1_b: c1(&l.ln1_b),
                    w_q: c2(&l.w_q),
                    w_k: c2(&l.w_k),
                    w_v: c2(&l.w_v),
                    w_o: c2(&l.w_o),
                    ln2_g: c1(&l.ln2_g),
                    ln2_b: c1(&l.ln2_b),
                    w_in: c2(&l.w_in),
                    w_out: c2(&l.w_out),
                })
                .collect(),
            lnf_g: c1(&self.lnf_g),
            lnf_b: c1(&self.lnf_b),
            unembed: c2(&self.unembed),
        }
    }

    /// FNV-1a over the little-endian bytes of every element.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for s in self.flat() {
            for &x in s {
                let bytes = x.f64().to_le_bytes();
                for b in bytes {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Full model: configuration, weights and tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub weights: Weights<T>,
    pub tokenizer: Tokenizer,
}

impl<T: Scalar> ModelState<T> {
    pub fn checksum(&self) -> u64 {
        self.weights.checksum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            weights: self.weights.cast(),
            tokenizer: self.tokenizer.clone(),
        }
    }
}

/// Deterministically initializes a model from `config.seed`.
///
/// Matrices are drawn from N(0, 0.02²); the two projections that write into
/// the residual stream are scaled down by `sqrt(2 · n_layers)`. Layer-norm
/// gains start at one.
pub fn build_model<T: Scalar>(config: &ModelConfig, tokenizer: Tokenizer) -> Result<ModelState<T>> {
    config.validate()?;
    if tokenizer.len() > config.vocab_size {
        return Err(Error::Config(format!(
            "vocab_size {} is smaller than the tokenizer's {} symbols",
            config.vocab_size,
            tokenizer.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std = 0.02;
    let resid_std = std / ((2 * config.n_layers) as f64).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |a: &mut Array2<T>, s: f64| {
        for x in a.iter_mut() {
            *x = T::of(normal.sample(&mut rng) * s);
        }
    };
    let mut w = Weights::<T>::zeros(config);
    draw(&mut w.tok_emb, std);
    draw(&mut w.pos_emb, std);
    for l in &mut w.layers {
        l.ln1_g.fill(T::one());
        l.ln2_g.fill(T::one());
        draw(&mut l.w_q, std);
        draw(&mut l.w_k, std);
        draw(&mut l.w_v, std);
        draw(&mut l.w_o, resid_std);
        draw(&mut l.w_in, std);
        draw(&mut l.w_out, resid_std);
    }
    w.lnf_g.fill(T::one());
    draw(&mut w.unembed, std);
    Ok(ModelState { config: config.clone(), weights: w, tokenizer })
}
