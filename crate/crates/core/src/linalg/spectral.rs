use super::{kernels, LinalgError, Matrix, Result};

pub const SPECTRAL_REL_TOL: f64 = 1e-9;
pub const SPECTRAL_MAX_ITERS: usize = 10_000;

/// Largest singular value by power iteration on the smaller Gram matrix
/// (`A^T A` or `A A^T`).
///
/// Iteration stops once the eigen-residual `||G v - mu v||` drops below
/// `SPECTRAL_REL_TOL * mu`, or after `SPECTRAL_MAX_ITERS` steps.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(LinalgError::Empty { op: "spectral_norm" });
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite { op: "spectral_norm" });
    }
    let gram = if a.cols() <= a.rows() { a.transpose().gram() } else { a.gram() };
    let n = gram.rows();
    if n == 1 {
        return Ok(gram.get(0, 0).max(0.0).sqrt());
    }
    if gram.is_zero() {
        return Ok(0.0);
    }

    // Fixed pseudo-random start so results are reproducible.
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            0.5 + (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    normalize(&mut v);

    let mut w = vec![0.0; n];
    let mut mu = 0.0;
    for _ in 0..SPECTRAL_MAX_ITERS {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = kernels::dot(gram.row(i), &v);
        }
        mu = kernels::dot(&v, &w);
        let mut resid = 0.0;
        for (wi, vi) in w.iter().zip(&v) {
            let d = wi - mu * vi;
            resid += d * d;
        }
        if resid.sqrt() <= SPECTRAL_REL_TOL * mu.abs() {
            break;
        }
        if normalize(&mut w) == 0.0 {
            return Ok(0.0);
        }
        std::mem::swap(&mut v, &mut w);
    }
    Ok(mu.max(0.0).sqrt())
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = kernels::dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_has_unit_norm() {
        for n in 1..6 {
            assert!((spectral_norm(&Matrix::identity(n)).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal() {
        let a = Matrix::diag(&[3.0, 1.0]).unwrap();
        assert!((spectral_norm(&a).unwrap() - 3.0).abs() < 1e-9);
    }

    /// Largest eigenvalue of a symmetric matrix via cyclic Jacobi rotations.
    #[allow(clippy::needless_range_loop)]
    fn jacobi_max_eig(mut s: Vec<Vec<f64>>) -> f64 {
        let n = s.len();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += s[p][q] * s[p][q];
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if s[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (s[q][q] - s[p][p]) / (2.0 * s[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * c;
                    for k in 0..n {
                        let skp = s[k][p];
                        let skq = s[k][q];
                        s[k][p] = c * skp - sn * skq;
                        s[k][q] = sn * skp + c * skq;
                    }
                    for k in 0..n {
                        let spk = s[p][k];
                        let sqk = s[q][k];
                        s[p][k] = c * spk - sn * sqk;
                        s[q][k] = sn * spk + c * sqk;
                    }
                }
            }
        }
        (0..n).map(|i| s[i][i]).fold(f64::MIN, f64::max)
    }

    #[test]
    fn matches_jacobi_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Matrix::from_fn(4, 6, |_, _| rng.random_range(-2.0..2.0)).unwrap();
            let ata = a.transpose().matmul(&a).unwrap();
            let rows: Vec<Vec<f64>> = (0..6).map(|i| ata.row(i).to_vec()).collect();
            let exact = jacobi_max_eig(rows).sqrt();
            let est = spectral_norm(&a).unwrap();
            assert!((est - exact).abs() < 1e-7, "{est} vs {exact}");
        }
    }

    #[test]
    fn transpose_invariant_and_submultiplicative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = Matrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0)).unwrap();
            let b = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0)).unwrap();
            let na = spectral_norm(&a).unwrap();
            assert!((na - spectral_norm(&a.transpose()).unwrap()).abs() < 1e-9);
            let nab = spectral_norm(&a.matmul(&b).unwrap()).unwrap();
            assert!(nab <= na * spectral_norm(&b).unwrap() + 1e-9);
        }
    }

    #[test]
    fn rejects_empty_and_reports_zero() {
        assert!(spectral_norm(&Matrix::zeros(0, 3)).is_err());
        assert_eq!(spectral_norm(&Matrix::zeros(3, 2)).unwrap(), 0.0);
    }
}
