// SPDX-License-Identifier: MIT OR Apache-2.0

//! Row-wise numeric kernels used by the forward and backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1, Axis};

use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// In-place numerically stable softmax.
pub fn softmax_inplace<T: Scalar>(mut row: ArrayViewMut1<'_, T>) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

pub fn softmax<T: Scalar>(row: ArrayView1<'_, T>) -> Array1<T> {
    let mut out = row.to_owned();
    softmax_inplace(out.view_mut());
    out
}

/// `log softmax(row)`.
pub fn log_softmax<T: Scalar>(row: ArrayView1<'_, T>) -> Array1<T> {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
    row.mapv(|x| x - lse)
}

/// Saved statistics of a layer norm application.
#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &Array2<T>,
    g: &Array1<T>,
    b: &Array1<T>,
) -> (Array2<T>, LnCache<T>) {
    let (n, d) = x.dim();
    let dn = T::of(d as f64);
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let mean = row.sum() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[i] = r;
        for (o, &v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
            *o = (v - mean) * r;
        }
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

/// Returns dx and accumulates dg, db when provided.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    g: &Array1<T>,
    grads: Option<(&mut Array1<T>, &mut Array1<T>)>,
) -> Array2<T> {
    let (n, d) = dy.dim();
    let dn = T::of(d as f64);
    if let Some((dg, db)) = grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let xh = cache.xhat.row(i);
        let dyr = dy.row(i);
        let mut mean_gdy = T::zero();
        let mut mean_gdy_xh = T::zero();
        for j in 0..d {
            let gdy = g[j] * dyr[j];
            mean_gdy = mean_gdy + gdy;
            mean_gdy_xh = mean_gdy_xh + gdy * xh[j];
        }
        mean_gdy = mean_gdy / dn;
        mean_gdy_xh = mean_gdy_xh / dn;
        let r = cache.rstd[i];
        let mut out = dx.row_mut(i);
        for j in 0..d {
            out[j] = r * (g[j] * dyr[j] - mean_gdy - xh[j] * mean_gdy_xh);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(array![1.0f64, 2.0, 3.0, -50.0].view());
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x > 0.0));
        let lp = log_softmax(array![1.0f64, 2.0, 3.0, -50.0].view());
        for (a, b) in p.iter().zip(lp.iter()) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let x = array![[0.3f64, -1.2, 2.0, 0.5], [1.0, 1.1, -0.4, 0.0]];
        let g = array![1.0, 0.5, -2.0, 1.5];
        let b = array![0.1, 0.0, 0.2, -0.3];
        let w = array![[0.7, -0.1, 0.4, 1.0], [0.2, 0.3, -0.9, 0.5]];
        let f = |x: &Array2<f64>| (layer_norm(x, &g, &b).0 * &w).sum();
        let (_, cache) = layer_norm(&x, &g, &b);
        let dx = layer_norm_backward(&w, &cache, &g, None);
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += 1e-6;
                let mut xm = x.clone();
                xm[[i, j]] -= 1e-6;
                let fd = (f(&xp) - f(&xm)) / 2e-6;
                assert!((fd - dx[[i, j]]).abs() < 1e-7);
            }
        }
    }
}
