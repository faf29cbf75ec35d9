use serde::{Deserialize, Serialize};

use super::{AnalysisError, Result};
use crate::edit::QKind;
use crate::linalg::{spectral_norm, Matrix};

/// Weight-shift error of residual distribution at layer `l` against its
/// upper bound `(|R^{l*} - R^L| + (L - l)|R^L|) |Q|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub layer: usize,
    pub last_layer: usize,
    pub term_gap: f64,
    pub term_dist: f64,
    pub norm_q: f64,
    pub q_kind: QKind,
    pub bound: f64,
    pub actual_error: f64,
    pub satisfied: bool,
}

impl BoundReport {
    /// Slack allowed on the inequality for floating-point error.
    pub const TOLERANCE: f64 = 1e-9;

    /// Recomputes `bound` and `satisfied` from the stored terms.
    pub fn is_consistent(&self) -> bool {
        let bound = (self.term_gap + self.term_dist) * self.norm_q;
        (bound - self.bound).abs() <= 1e-12 * bound.abs().max(1.0)
            && self.satisfied == (self.actual_error <= self.bound + Self::TOLERANCE)
    }
}

fn evaluate(r_lstar: &Matrix, r_last: &Matrix, l: usize, last: usize, q: &Matrix, q_kind: QKind) -> Result<BoundReport> {
    if l > last {
        return Err(AnalysisError::LayerOrder { layer: l, last });
    }
    if r_lstar.shape() != r_last.shape() {
        return Err(AnalysisError::Shape(format!(
            "R^l* is {}x{} but R^L is {}x{}",
            r_lstar.rows(),
            r_lstar.cols(),
            r_last.rows(),
            r_last.cols()
        )));
    }
    let ideal = r_lstar.matmul(q)?;
    let distributed = r_last.scale(1.0 / (last - l + 1) as f64).matmul(q)?;
    let term_gap = spectral_norm(&r_lstar.sub(r_last)?)?;
    let term_dist = (last - l) as f64 * spectral_norm(r_last)?;
    let norm_q = spectral_norm(q)?;
    let bound = (term_gap + term_dist) * norm_q;
    let actual_error = spectral_norm(&ideal.sub(&distributed)?)?;
    Ok(BoundReport {
        layer: l,
        last_layer: last,
        term_gap,
        term_dist,
        norm_q,
        q_kind,
        bound,
        actual_error,
        satisfied: actual_error <= bound + BoundReport::TOLERANCE,
    })
}

/// Bound with `Q = K_1^T (C_0 + K_1 K_1^T)^{-1}`.
pub fn theorem_bound(r_lstar: &Matrix, r_last: &Matrix, l: usize, last: usize, q: &Matrix) -> Result<BoundReport> {
    evaluate(r_lstar, r_last, l, last, q, QKind::Q)
}

/// Bound with `Q' = K_1^T (C_p + C_0 + K_1 K_1^T)^{-1}` from sequential editing.
pub fn lemma_bound(r_lstar: &Matrix, r_last: &Matrix, l: usize, last: usize, q_prime: &Matrix) -> Result<BoundReport> {
    evaluate(r_lstar, r_last, l, last, q_prime, QKind::QPrime)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: f64) -> Matrix {
        Matrix::new(1, 1, vec![x]).unwrap()
    }

    #[test]
    fn scalar_bound_by_hand() {
        let r = theorem_bound(&s(1.0), &s(2.0), 3, 5, &s(0.5)).unwrap();
        assert!((r.bound - 2.5).abs() < 1e-15);
        // |1 * 0.5 - (2/3) * 0.5| = 1/6
        assert!((r.actual_error - 1.0 / 6.0).abs() < 1e-15);
        assert!(r.satisfied && r.is_consistent());
    }

    #[test]
    fn degenerate_last_layer_is_zero() {
        let r = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let q = Matrix::from_rows(&[vec![0.3, 0.1], vec![0.2, -0.4]]).unwrap();
        let b = theorem_bound(&r, &r, 4, 4, &q).unwrap();
        assert_eq!((b.bound, b.actual_error), (0.0, 0.0));
        assert_eq!(lemma_bound(&r, &r, 4, 4, &q).unwrap().q_kind, QKind::QPrime);
    }

    #[test]
    fn layer_above_last_is_rejected() {
        assert!(theorem_bound(&s(1.0), &s(1.0), 5, 4, &s(1.0)).is_err());
        assert!(theorem_bound(&s(1.0), &Matrix::zeros(1, 2), 1, 4, &s(1.0)).is_err());
    }
}
