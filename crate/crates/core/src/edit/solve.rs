use super::strategy::{IdentityHooks, SolveHooks};
use super::{DeltaDiagnostics, QKind, Result, UpdateDelta};
use crate::linalg::{dims, solve_right, spectral_norm, LinalgError, Matrix};

fn check(op: &'static str, r: &Matrix, k1: &Matrix, covs: &[&Matrix]) -> Result<()> {
    if r.cols() != k1.cols() {
        return Err(LinalgError::DimensionMismatch {
            op,
            expected: format!("R with {} columns", k1.cols()),
            found: dims(r.rows(), r.cols()),
        }
        .into());
    }
    for c in covs {
        if c.shape() != (k1.rows(), k1.rows()) {
            return Err(LinalgError::DimensionMismatch {
                op,
                expected: dims(k1.rows(), k1.rows()),
                found: dims(c.rows(), c.cols()),
            }
            .into());
        }
    }
    Ok(())
}

pub(crate) fn solve_system(
    layer: usize,
    r: &Matrix,
    k1: &Matrix,
    a: Matrix,
    q_used: QKind,
    hooks: &dyn SolveHooks,
) -> Result<UpdateDelta> {
    let a = hooks.adjust_covariance(layer, a);
    let rk = r.matmul_transb(k1)?;
    let delta = hooks.adjust_delta(layer, solve_right(&a, &rk)?);
    let q = solve_right(&a, &k1.transpose())?;
    let diagnostics = DeltaDiagnostics { norm_r: spectral_norm(r)?, norm_q: spectral_norm(&q)?, q_used };
    Ok(UpdateDelta { layer, delta, diagnostics, q })
}

/// `Δ = R K_1^T (C_0 + K_1 K_1^T)^{-1}`
pub fn closed_form_delta(layer: usize, r: &Matrix, k1: &Matrix, c0: &Matrix) -> Result<UpdateDelta> {
    check("closed_form_delta", r, k1, &[c0])?;
    solve_system(layer, r, k1, c0.add(&k1.gram())?, QKind::Q, &IdentityHooks)
}

/// `Δ = R K_1^T (C_p + C_0 + K_1 K_1^T)^{-1}`
pub fn sequential_delta(layer: usize, r: &Matrix, k1: &Matrix, c0: &Matrix, cp: &Matrix) -> Result<UpdateDelta> {
    sequential_delta_with(layer, r, k1, c0, cp, &IdentityHooks)
}

pub(crate) fn sequential_delta_with(
    layer: usize,
    r: &Matrix,
    k1: &Matrix,
    c0: &Matrix,
    cp: &Matrix,
    hooks: &dyn SolveHooks,
) -> Result<UpdateDelta> {
    check("sequential_delta", r, k1, &[c0, cp])?;
    // `0 + C_0` is exact, so a zero prior reproduces the closed form bit for bit.
    let a = cp.add(c0)?.add(&k1.gram())?;
    solve_system(layer, r, k1, a, QKind::QPrime, hooks)
}

/// `K_1^T (C_p + C_0 + K_1 K_1^T)^{-1}`; pass a zero `cp` for `Q`.
pub fn q_matrix(k1: &Matrix, c0: &Matrix, cp: &Matrix) -> Result<Matrix> {
    check("q_matrix", &Matrix::zeros(0, k1.cols()), k1, &[c0, cp])?;
    Ok(solve_right(&cp.add(c0)?.add(&k1.gram())?, &k1.transpose())?)
}

/// `cache + K_1 K_1^T`
pub fn update_prior_cov(cache: &Matrix, k1: &Matrix) -> Result<Matrix> {
    check("update_prior_cov", &Matrix::zeros(0, k1.cols()), k1, &[cache])?;
    Ok(cache.add(&k1.gram())?)
}
