// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense symmetric solves and the closed-form key-value insertion.
//!
//! Weight matrices here use the column convention `v = W k`: `W` has shape
//! `[d_out, d_in]`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky<T: Scalar>(a: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Argument(format!("cholesky needs a square matrix, got {:?}", a.dim())));
    }
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        // pivots that vanish relative to the diagonal mean numerical rank loss
        if !(d > T::epsilon() * T::of(n as f64) * a[[j, j]].abs()) || !d.is_finite() {
            return Err(Error::Argument(format!("matrix is not positive definite (pivot {j} = {d})")));
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` given the lower factor `L`.
pub fn cholesky_solve<T: Scalar>(l: &Array2<T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in i + 1..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

fn column<T: Scalar>(v: ArrayView1<'_, T>) -> Array2<T> {
    v.to_owned().insert_axis(ndarray::Axis(1))
}

/// `Ŵ = W + (v* − W k*)(C⁻¹k*)ᵀ / ((C⁻¹k*)ᵀ k*)`.
pub fn rank_one_update<T: Scalar>(
    w: ArrayView2<'_, T>,
    k_star: ArrayView1<'_, T>,
    v_star: ArrayView1<'_, T>,
    c: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    let l = cholesky(c)?;
    rank_one_update_factored(w, k_star, v_star, &l)
}

pub(crate) fn rank_one_update_factored<T: Scalar>(
    w: ArrayView2<'_, T>,
    k_star: ArrayView1<'_, T>,
    v_star: ArrayView1<'_, T>,
    c_chol: &Array2<T>,
) -> Result<Array2<T>> {
    check_shapes(w, k_star.len(), v_star.len(), c_chol)?;
    let u: Array1<T> = cholesky_solve(c_chol, column(k_star).view()).column(0).to_owned();
    let denom = u.dot(&k_star);
    let scale = u.dot(&u).sqrt() * k_star.dot(&k_star).sqrt();
    if !denom.is_finite() || denom.f64() <= 1e-12 * scale.f64() || denom == T::zero() {
        return Err(Error::SingularKey(denom.f64()));
    }
    let resid = &v_star - &w.dot(&k_star);
    let mut out = w.to_owned();
    for i in 0..out.nrows() {
        let r = resid[i] / denom;
        for j in 0..out.ncols() {
            out[[i, j]] += r * u[j];
        }
    }
    Ok(out)
}

/// Exact multi-key insertion: the minimum-`C`-norm change with `Ŵ K = V*`,
/// `Δ = (V* − W K)(Kᵀ C⁻¹ K)⁻¹ (C⁻¹ K)ᵀ`. Keys are the columns of `K`.
/// With a single key this is [`rank_one_update`].
pub fn batch_update<T: Scalar>(
    w: ArrayView2<'_, T>,
    keys: ArrayView2<'_, T>,
    values: ArrayView2<'_, T>,
    c: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    let l = cholesky(c)?;
    batch_update_factored(w, keys, values, &l)
}

pub(crate) fn batch_update_factored<T: Scalar>(
    w: ArrayView2<'_, T>,
    keys: ArrayView2<'_, T>,
    values: ArrayView2<'_, T>,
    c_chol: &Array2<T>,
) -> Result<Array2<T>> {
    check_shapes(w, keys.nrows(), values.nrows(), c_chol)?;
    if keys.ncols() != values.ncols() || keys.ncols() == 0 {
        return Err(Error::Argument(format!("{} keys but {} values", keys.ncols(), values.ncols())));
    }
    if keys.ncols() == 1 {
        return rank_one_update_factored(w, keys.column(0), values.column(0), c_chol);
    }
    let u = cholesky_solve(c_chol, keys);
    let gram = keys.t().dot(&u);
    let g_chol = cholesky(gram.view()).map_err(|_| {
        let min_diag = gram.diag().iter().fold(f64::INFINITY, |m, x| m.min(x.f64()));
        Error::SingularKey(min_diag)
    })?;
    let resid = &values - &w.dot(&keys);
    // Δ = R G⁻¹ Uᵀ = (G⁻¹ Rᵀ)ᵀ Uᵀ
    let coef = cholesky_solve(&g_chol, resid.t());
    Ok(&w + &coef.t().dot(&u.t()))
}

fn check_shapes<T: Scalar>(w: ArrayView2<'_, T>, d_in: usize, d_out: usize, c_chol: &Array2<T>) -> Result<()> {
    if w.ncols() != d_in || w.nrows() != d_out || c_chol.nrows() != d_in {
        return Err(Error::Argument(format!(
            "inconsistent shapes: W {:?}, key {d_in}, value {d_out}, C {:?}",
            w.dim(),
            c_chol.dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn spd(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        let a = random(rng, n, n + 3);
        a.dot(&a.t()) + Array2::<f64>::eye(n) * 0.1
    }

    #[test]
    fn hand_example() {
        let w = Array2::<f64>::eye(2);
        let out = rank_one_update(w.view(), array![1.0, 0.0].view(), array![2.0, 0.0].view(), Array2::eye(2).view()).unwrap();
        assert_eq!(out, array![[2.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn unchanged_when_value_already_stored() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 3, 4);
        let k = random(&mut rng, 4, 1).column(0).to_owned();
        let c = spd(&mut rng, 4);
        let v = w.dot(&k);
        assert_eq!(rank_one_update(w.view(), k.view(), v.view(), c.view()).unwrap(), w);
    }

    #[test]
    fn cholesky_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = spd(&mut rng, 6);
        let l = cholesky(a.view()).unwrap();
        approx::assert_abs_diff_eq!(l.dot(&l.t()), a, epsilon = 1e-10);
        let b = random(&mut rng, 6, 2);
        approx::assert_abs_diff_eq!(a.dot(&cholesky_solve(&l, b.view())), b, epsilon = 1e-9);
        assert!(cholesky(array![[1.0, 2.0], [2.0, 1.0]].view()).is_err());
    }

    #[test]
    fn zero_key_is_singular() {
        let w = Array2::<f64>::eye(2);
        let r = rank_one_update(w.view(), array![0.0, 0.0].view(), array![1.0, 0.0].view(), Array2::eye(2).view());
        assert!(matches!(r, Err(Error::SingularKey(_))));
    }

    #[test]
    fn batch_inserts_every_key_and_matches_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d_in, d_out) = (12, 5);
        let w = random(&mut rng, d_out, d_in);
        let c = spd(&mut rng, d_in);
        let keys = random(&mut rng, d_in, 4);
        let values = random(&mut rng, d_out, 4);
        let out = batch_update(w.view(), keys.view(), values.view(), c.view()).unwrap();
        approx::assert_abs_diff_eq!(out.dot(&keys), values, epsilon = 1e-9);

        let k1 = keys.column(0);
        let v1 = values.column(0);
        let a = rank_one_update(w.view(), k1, v1, c.view()).unwrap();
        let l = cholesky(c.view()).unwrap();
        let u = cholesky_solve(&l, keys.slice(ndarray::s![.., 0..1]));
        // generic multi-key path with B = 1 written out
        let g = keys.slice(ndarray::s![.., 0..1]).t().dot(&u)[[0, 0]];
        let b = &w + &((&v1 - &w.dot(&k1)).insert_axis(ndarray::Axis(1)).dot(&u.t()) / g);
        approx::assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn dependent_keys_are_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(&mut rng, 3, 5);
        let c = spd(&mut rng, 5);
        let k = random(&mut rng, 5, 1);
        let keys = ndarray::concatenate![ndarray::Axis(1), k, k];
        let values = random(&mut rng, 3, 2);
        assert!(matches!(batch_update(w.view(), keys.view(), values.view(), c.view()), Err(Error::SingularKey(_))));
    }
}
