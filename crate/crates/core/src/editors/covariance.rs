// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::linalg::cholesky;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tinylm::{ModelState, Pass, Site, TokenSeq};

/// Uncentered second moment `C = Σ k kᵀ + ridge·I` of MLP keys at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceStat {
    pub layer: usize,
    pub matrix: Array2<f64>,
    pub samples: usize,
    pub ridge: f64,
    /// Fewer samples than key dimensions: `C` is rank deficient before the ridge.
    pub rank_warning: bool,
}

impl CovarianceStat {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Adds `r·I` on top of the current ridge.
    pub fn add_ridge(&mut self, r: f64) {
        for i in 0..self.dim() {
            self.matrix[[i, i]] += r;
        }
        self.ridge += r;
    }

    pub fn trace(&self) -> f64 {
        self.matrix.diag().sum()
    }

    /// Lower Cholesky factor in the model's scalar type.
    pub fn factor<T: Scalar>(&self) -> Result<Array2<T>> {
        cholesky(self.matrix.mapv(T::of).view()).map_err(|_| Error::SingularKey(self.ridge))
    }
}

/// Accumulates `C` over every token position of `sample` (stopping after
/// `max_positions` when given) at the MLP key site of `layer`.
pub fn estimate_covariance<T: Scalar>(
    model: &ModelState<T>,
    sample: &[TokenSeq],
    layer: usize,
    max_positions: Option<usize>,
    ridge: f64,
) -> Result<CovarianceStat> {
    if layer >= model.config.n_layers {
        return Err(Error::Index(format!("layer {layer} outside model of {} layers", model.config.n_layers)));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::Argument(format!("ridge must be finite and non-negative, got {ridge}")));
    }
    let dm = model.config.d_mlp;
    let cap = max_positions.unwrap_or(usize::MAX);
    let mut c = Array2::<f64>::zeros((dm, dm));
    let mut samples = 0;
    for chunk in sample.chunks(32) {
        if samples >= cap {
            break;
        }
        let seqs: Vec<&[u32]> = chunk.iter().filter(|s| !s.is_empty()).map(|s| s.as_slice()).collect();
        if seqs.is_empty() {
            continue;
        }
        let pass = Pass::run(model, &seqs, &[])?;
        let keys = pass.site_rows(layer, Site::MlpAct);
        let take = (cap - samples).min(keys.nrows());
        let k = keys.slice(ndarray::s![..take, ..]).mapv(|x| x.f64());
        c += &k.t().dot(&k);
        samples += take;
    }
    let mut stat = CovarianceStat { layer, matrix: c, samples, ridge: 0.0, rank_warning: samples < dm };
    stat.add_ridge(ridge);
    Ok(stat)
}

/// Covariances for several layers, estimated from one sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSet {
    pub stats: BTreeMap<usize, CovarianceStat>,
}

impl CovarianceSet {
    /// Ridge is `ridge_factor · trace(C)/d` per layer.
    pub fn estimate<T: Scalar>(
        model: &ModelState<T>,
        sample: &[TokenSeq],
        layers: impl IntoIterator<Item = usize>,
        max_positions: usize,
        ridge_factor: f64,
    ) -> Result<Self> {
        let mut stats = BTreeMap::new();
        for l in layers {
            if stats.contains_key(&l) {
                continue;
            }
            let mut st = estimate_covariance(model, sample, l, Some(max_positions), 0.0)?;
            let r = ridge_factor * st.trace() / st.dim() as f64;
            st.add_ridge(r.max(f64::MIN_POSITIVE));
            stats.insert(l, st);
        }
        Ok(Self { stats })
    }

    pub fn get(&self, layer: usize) -> Result<&CovarianceStat> {
        self.stats
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("no covariance estimated for layer {layer}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{build_model, forward, CapturePoint, ModelConfig, Tokenizer};
    use nalgebra::DMatrix;
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> ModelState<f64> {
        let tok = Tokenizer::from_symbols((0..12).map(|i| format!("w{i}")));
        let cfg = ModelConfig { n_layers: 2, d_model: 8, d_mlp: 16, n_heads: 2, vocab_size: 12, max_seq_len: 16, seed: 4 };
        build_model(&cfg, tok).unwrap()
    }

    fn sample(n: usize, seed: u64) -> Vec<TokenSeq> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..rng.gen_range(3..12)).map(|_| rng.gen_range(0..12)).collect()).collect()
    }

    fn min_eig(c: &Array2<f64>) -> f64 {
        let m = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| c[[i, j]]);
        m.symmetric_eigenvalues().min()
    }

    #[test]
    fn single_vector_is_outer_product() {
        let m = model();
        let seq = vec![3u32];
        let st = estimate_covariance(&m, &[seq.clone()], 1, None, 0.0).unwrap();
        let k = forward(&m, &seq, &[CapturePoint::new(1, 0, Site::MlpAct)], &[]).unwrap().captured.into_values().next().unwrap();
        let kk = k.clone().insert_axis(Axis(1)).dot(&k.insert_axis(Axis(0)));
        assert_eq!(st.samples, 1);
        assert!(st.rank_warning);
        approx::assert_abs_diff_eq!(st.matrix, kk, epsilon = 1e-14);
    }

    #[test]
    fn ridge_shifts_spectrum() {
        let m = model();
        let st = estimate_covariance(&m, &sample(2, 1), 0, None, 0.25).unwrap();
        assert!(min_eig(&st.matrix) >= 0.25 - 1e-9);
        let sym = &st.matrix - &st.matrix.t();
        assert!(sym.iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn matches_two_pass_bruteforce() {
        let m = model();
        let data = sample(300, 2);
        let st = estimate_covariance(&m, &data, 1, Some(1000), 1e-3).unwrap();
        assert_eq!(st.samples, 1000);
        let mut c = Array2::<f64>::eye(16) * 1e-3;
        let mut n = 0;
        'outer: for s in &data {
            let caps: Vec<_> = (0..s.len()).map(|p| CapturePoint::new(1, p, Site::MlpAct)).collect();
            let tr = forward(&m, s, &caps, &[]).unwrap();
            for cp in caps {
                if n == 1000 {
                    break 'outer;
                }
                let k = &tr.captured[&cp];
                for i in 0..16 {
                    for j in 0..16 {
                        c[[i, j]] += k[i] * k[j];
                    }
                }
                n += 1;
            }
        }
        approx::assert_relative_eq!(st.matrix, c, max_relative = 1e-10);
        assert!(min_eig(&st.matrix) > 0.0);
        st.factor::<f64>().unwrap();
    }

    #[test]
    fn set_uses_relative_ridge() {
        let m = model();
        let set = CovarianceSet::estimate(&m, &sample(20, 3), [1, 0, 1], 500, 1e-2).unwrap();
        assert_eq!(set.stats.len(), 2);
        let st = set.get(1).unwrap();
        approx::assert_relative_eq!(st.ridge, 1e-2 * (st.trace() - 16.0 * st.ridge) / 16.0, max_relative = 1e-9);
        assert!(set.get(5).is_err());
    }
}
