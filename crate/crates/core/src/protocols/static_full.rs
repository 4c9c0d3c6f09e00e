use super::{check_closed_left_half_plane, DesignError, Result};
use crate::analysis::{lyapunov_inequality_check, LyapunovCheck};
use crate::matops::{self, Mat, VERIFY_MARGIN};

/// `u_i = F ζ_i` with `F = −ρBᵀP`.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticProtocol {
    pub f: Mat,
    pub rho: f64,
    pub p: Mat,
    pub q_design: Mat,
    pub beta: f64,
    /// Lyapunov inequality evaluated at `ℓ = β` and `ℓ = 10β`.
    pub lyapunov: Vec<(f64, LyapunovCheck)>,
    /// Spectral abscissa of `A + ℓBF` on a spot-check grid of `ℓ ≥ β`.
    pub spot_checks: Vec<(f64, f64)>,
}

/// Riccati-based static gain that makes `A + ℓBF` Hurwitz for every `ℓ ≥ β`.
///
/// `rho` defaults to `1/(2β)`; an explicit value below that is rejected.
pub fn design_static_full_state(a: &Mat, b: &Mat, beta: f64, q_design: &Mat, rho: Option<f64>) -> Result<StaticProtocol> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q_design.shape() != (n, n) {
        return Err(DesignError::DimensionMismatch(format!(
            "A {}x{}, B {}x{}, Q {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            q_design.nrows(),
            q_design.ncols()
        )));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(DesignError::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    let rho_min = 1.0 / (2.0 * beta);
    let rho = match rho {
        None => rho_min,
        Some(r) if r >= rho_min => r,
        Some(r) => {
            return Err(DesignError::InvalidInput(format!(
                "rho = {r} is below 1/(2 beta) = {rho_min}"
            )))
        }
    };
    if q_design != &q_design.transpose() || q_design.clone().cholesky().is_none() {
        return Err(DesignError::InvalidInput("Q_design must be symmetric positive definite".into()));
    }
    check_closed_left_half_plane(a)?;

    let care = matops::solve_care(a, b, q_design)?;
    let p = care.p;
    let f = -(b.transpose() * &p) * rho;

    let lyapunov: Vec<(f64, LyapunovCheck)> = [beta, 10.0 * beta]
        .into_iter()
        .map(|ell| (ell, lyapunov_inequality_check(a, b, &p, q_design, ell, rho)))
        .collect();
    if let Some((ell, chk)) = lyapunov.iter().find(|(_, c)| !c.holds) {
        return Err(DesignError::CertificateFailed(format!(
            "Lyapunov inequality fails at l = {ell} (slack {:.3e})",
            chk.slack
        )));
    }

    let mut spot_checks = Vec::new();
    for factor in [1.0, 2.0, 5.0, 10.0, 100.0] {
        let ell = factor * beta;
        let check = matops::is_hurwitz(&(a + b * &f * ell), VERIFY_MARGIN)?;
        if !check.hurwitz {
            return Err(DesignError::CertificateFailed(format!(
                "A + l B F is not Hurwitz at l = {ell} (abscissa {:.3e})",
                check.abscissa
            )));
        }
        spot_checks.push((ell, check.abscissa));
    }

    Ok(StaticProtocol {
        f,
        rho,
        p,
        q_design: q_design.clone(),
        beta,
        lyapunov,
        spot_checks,
    })
}
