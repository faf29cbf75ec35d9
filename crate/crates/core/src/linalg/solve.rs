use super::{dims, kernels, LinalgError, Matrix, Result};

/// Lower-triangular Cholesky factor of a symmetric matrix, or `None` when a
/// pivot is not strictly positive.
pub fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let s = kernels::dot(&l.row(j)[..j], &l.row(j)[..j]);
        let pivot = a.get(j, j) - s;
        if pivot <= 0.0 || !pivot.is_finite() {
            return None;
        }
        let d = pivot.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let s = kernels::dot(&l.row(i)[..j], &l.row(j)[..j]);
            l.set(i, j, (a.get(i, j) - s) / d);
        }
    }
    Some(l)
}

/// Ridge added when the plain factorization fails: `1e-6 * trace(A) / n`.
pub fn ridge_epsilon(a: &Matrix) -> f64 {
    let n = a.rows().max(1) as f64;
    1e-6 * a.trace() / n
}

/// Solves `L L^T x = b` in place.
fn cholesky_solve_in_place(l: &Matrix, b: &mut [f64]) {
    let n = l.rows();
    for i in 0..n {
        let s = kernels::dot(&l.row(i)[..i], &b[..i]);
        b[i] = (b[i] - s) / l.get(i, i);
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l.get(k, i) * b[k]).sum();
        b[i] = (b[i] - s) / l.get(i, i);
    }
}

/// Computes `X = B A^{-1}` for symmetric `A`.
///
/// Factorizes `A` with Cholesky; if that fails the system is retried once on
/// `A + eps I` with `eps = 1e-6 * trace(A) / n`.
pub fn solve_right(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(LinalgError::DimensionMismatch {
            op: "solve_right",
            expected: "square A".into(),
            found: dims(a.rows(), a.cols()),
        });
    }
    if b.cols() != a.rows() {
        return Err(LinalgError::DimensionMismatch {
            op: "solve_right",
            expected: format!("B with {} columns", a.rows()),
            found: dims(b.rows(), b.cols()),
        });
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(LinalgError::NonFinite { op: "solve_right" });
    }
    let l = match cholesky(a) {
        Some(l) => l,
        None => {
            let eps = ridge_epsilon(a);
            let mut ridged = a.clone();
            for i in 0..a.rows() {
                ridged.set(i, i, a.get(i, i) + eps);
            }
            cholesky(&ridged).ok_or(LinalgError::Singular { epsilon: eps })?
        }
    };
    // X A = B  <=>  A X^T = B^T, one row of B at a time.
    let mut out = b.clone();
    for r in 0..b.rows() {
        cholesky_solve_in_place(&l, out.row_mut(r));
    }
    if !out.is_finite() {
        return Err(LinalgError::NonFinite { op: "solve_right" });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let g = Matrix::from_fn(n, n + 2, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let mut a = g.gram();
        for i in 0..n {
            a.set(i, i, a.get(i, i) + 0.1);
        }
        a
    }

    #[test]
    fn identity_returns_b() {
        let b = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(solve_right(&Matrix::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn scalar_division() {
        let a = Matrix::new(1, 1, vec![2.0]).unwrap();
        let b = Matrix::new(1, 1, vec![6.0]).unwrap();
        assert!((solve_right(&a, &b).unwrap().get(0, 0) - 3.0).abs() < 1e-14);
    }

    /// Plain gradient descent on ||XA - B||_F^2; independent of the factorization.
    fn gd_minimizer(a: &Matrix, b: &Matrix) -> Matrix {
        let lmax = crate::linalg::spectral_norm(a).unwrap();
        let step = 1.0 / (lmax * lmax);
        let mut x = Matrix::zeros(b.rows(), b.cols());
        for _ in 0..200_000 {
            let r = x.matmul(a).unwrap().sub(b).unwrap();
            let g = r.matmul(&a.transpose()).unwrap();
            if g.frobenius_norm() < 1e-12 {
                break;
            }
            x = x.sub(&g.scale(step)).unwrap();
        }
        x
    }

    #[test]
    fn matches_gradient_descent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_spd(5, &mut rng);
        let b = Matrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let x = solve_right(&a, &b).unwrap();
        let oracle = gd_minimizer(&a, &b);
        assert!(x.sub(&oracle).unwrap().frobenius_norm() < 1e-6);
    }

    #[test]
    fn singular_falls_back_to_ridge() {
        let v = Matrix::new(1, 3, vec![1.0, 2.0, 2.0]).unwrap();
        let a = v.transpose().matmul(&v).unwrap();
        let b = Matrix::new(1, 3, vec![1.0, 2.0, 2.0]).unwrap();
        let x = solve_right(&a, &b).unwrap();
        assert!(x.is_finite());
        let eps = ridge_epsilon(&a);
        let mut ridged = a.clone();
        for i in 0..3 {
            ridged.set(i, i, a.get(i, i) + eps);
        }
        let res = x.matmul(&ridged).unwrap().sub(&b).unwrap().frobenius_norm();
        assert!(res < 1e-8, "residual {res}");
    }

    #[test]
    fn zero_matrix_is_singular() {
        let a = Matrix::zeros(2, 2);
        let b = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(matches!(solve_right(&a, &b), Err(LinalgError::Singular { .. })));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let a = Matrix::identity(3);
        let b = Matrix::zeros(2, 2);
        assert!(matches!(solve_right(&a, &b), Err(LinalgError::DimensionMismatch { .. })));
    }

    proptest::proptest! {
        #[test]
        fn reconstructs_b(seed in 0u64..10_000, n in 1usize..7, m in 1usize..5, log_cond in 0.0f64..6.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // SPD with prescribed spectrum via a random orthogonal basis (Gram-Schmidt).
            let g = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).unwrap();
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for i in 0..n {
                let mut v = g.row(i).to_vec();
                for q in &basis {
                    let p = kernels::dot(&v, q);
                    kernels::axpy(-p, q, &mut v);
                }
                let nv = kernels::dot(&v, &v).sqrt().max(1e-12);
                v.iter_mut().for_each(|x| *x /= nv);
                basis.push(v);
            }
            let q = Matrix::from_rows(&basis).unwrap();
            let eig: Vec<f64> = (0..n)
                .map(|i| if n == 1 { 1.0 } else { 10f64.powf(-log_cond * i as f64 / (n - 1) as f64) })
                .collect();
            let a = q.transpose().matmul(&Matrix::diag(&eig).unwrap()).unwrap().matmul(&q).unwrap();
            let mut sym = a.clone();
            for i in 0..n { for j in 0..n { sym.set(i, j, 0.5 * (a.get(i, j) + a.get(j, i))); } }
            let b = Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0)).unwrap();
            let x = solve_right(&sym, &b).unwrap();
            let res = x.matmul(&sym).unwrap().sub(&b).unwrap().frobenius_norm();
            proptest::prop_assert!(res / b.frobenius_norm().max(1.0) <= 1e-8, "relative residual {}", res);
        }
    }
}
