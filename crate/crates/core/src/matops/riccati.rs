use super::spectral::{
    eigenvalues, is_detectable, is_hurwitz, is_stabilizable, null_space_basis, pseudo_inverse, spectral_abscissa,
};
use super::sylvester::{solve_lyapunov, solve_sylvester};
use super::{block, ensure_shape, ensure_square, symmetrize, LinalgError, Mat, Result, DESIGN_MARGIN, VERIFY_MARGIN};

const MAX_NEWTON_STEPS: usize = 100;
const MAX_SIGN_STEPS: usize = 100;

/// Stabilizing solution of `AᵀP + PA − PBBᵀP + Q = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution {
    pub p: Mat,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Frobenius norm of `AᵀP + PA − PBBᵀP + Q`.
pub fn care_residual(a: &Mat, b: &Mat, q: &Mat, p: &Mat) -> f64 {
    let pb = p * b;
    (a.transpose() * p + p * a - &pb * pb.transpose() + q).norm()
}

/// Frobenius norm of `AQ + QAᵀ − 2β·QCᵀCQ + I`.
pub fn filter_care_residual(a: &Mat, c: &Mat, beta: f64, q: &Mat) -> f64 {
    let qc = q * c.transpose();
    let n = a.nrows();
    (a * q + q * a.transpose() - &qc * qc.transpose() * (2.0 * beta) + Mat::identity(n, n)).norm()
}

// Orthonormal `[R, N]` with `R` spanning the controllable subspace of `(A, B)`.
// The Krylov blocks are built from a rescaled `A` so powers stay bounded.
fn controllable_split(a: &Mat, b: &Mat) -> Result<(Mat, usize)> {
    let n = a.nrows();
    let scaled = a / (1.0 + a.norm());
    let mut krylov = Mat::zeros(n, n * b.ncols());
    let mut blk = b.clone();
    for k in 0..n {
        krylov.view_mut((0, k * b.ncols()), (n, b.ncols())).copy_from(&blk);
        blk = &scaled * blk;
    }
    let uncontrollable = null_space_basis(&krylov.transpose(), 1e-10)?;
    let r = n - uncontrollable.ncols();
    if r == n {
        return Ok((Mat::identity(n, n), n));
    }
    let range = null_space_basis(&uncontrollable.transpose(), 1e-10)?;
    let mut t = Mat::zeros(n, n);
    t.view_mut((0, 0), (n, r)).copy_from(&range);
    t.view_mut((0, r), (n, n - r)).copy_from(&uncontrollable);
    Ok((t, r))
}

// Bass's construction on the controllable part: with c above every |Re λ| of
// A_c, so that −(A_c + cI) is Hurwitz, X solving −(A_c + cI)X − X(A_c + cI)ᵀ = −2B_cB_cᵀ is positive
// definite and K_c = B_cᵀX⁻¹ makes A_c − B_cK_c Hurwitz. Uncontrollable modes
// must already be stable.
fn stabilizing_seed(a: &Mat, b: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let abscissa = spectral_abscissa(a)?;
    if abscissa < -VERIFY_MARGIN {
        return Ok(Mat::zeros(b.ncols(), n));
    }
    let (t, r) = controllable_split(a, b)?;
    let a_t = t.transpose() * a * &t;
    let b_t = t.transpose() * b;
    let a_c = a_t.view((0, 0), (r, r)).into_owned();
    let b_c = b_t.rows(0, r).into_owned();
    let shift = eigenvalues(&a_c)?.iter().map(|l| l.re.abs()).fold(0.0, f64::max) + 1.0;
    let neg = -(a_c + Mat::identity(r, r) * shift);
    let bbt = &b_c * b_c.transpose();
    let x = symmetrize(&solve_sylvester(&neg, &neg.transpose(), &(-bbt * 2.0))?);
    let mut k_t = Mat::zeros(b.ncols(), n);
    k_t.view_mut((0, 0), (b.ncols(), r))
        .copy_from(&(b_c.transpose() * pseudo_inverse(&x, 1e-14)?));
    let k = k_t * t.transpose();
    if !is_hurwitz(&(a - b * &k), VERIFY_MARGIN)?.hurwitz {
        return Err(LinalgError::NotStabilizable);
    }
    Ok(k)
}

// Stable-subspace seed from the sign of the Hamiltonian
// H = [[A, −BBᵀ], [−Q, −Aᵀ]], by the determinant-scaled Newton iteration.
// [I; P] spans the kernel of sign(H) + I.
fn sign_function_seed(a: &Mat, b: &Mat, q: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let bbt = b * b.transpose();
    let mut z = block(&[&[a, &(-&bbt)], &[&(-q), &(-a.transpose())]]);
    for _ in 0..MAX_SIGN_STEPS {
        let lu = z.clone().full_piv_lu();
        let log_det: f64 = lu.u().diagonal().iter().map(|d| d.abs().ln()).sum();
        let inv = lu.try_inverse().ok_or(LinalgError::SingularPencil)?;
        let c = (-log_det / (2 * n) as f64).exp();
        let next = (&z * c + inv / c) * 0.5;
        let step = (&next - &z).norm();
        z = next;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(LinalgError::NoConvergence("Hamiltonian sign iteration"));
        }
        if step <= 1e-10 * z.norm() {
            let mut lhs = Mat::zeros(2 * n, n);
            lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
            lhs.view_mut((n, 0), (n, n))
                .copy_from(&(z.view((n, n), (n, n)) + Mat::identity(n, n)));
            let mut rhs = Mat::zeros(2 * n, n);
            rhs.view_mut((0, 0), (n, n))
                .copy_from(&(-(z.view((0, 0), (n, n)) + Mat::identity(n, n))));
            rhs.view_mut((n, 0), (n, n)).copy_from(&(-z.view((n, 0), (n, n))));
            let p = symmetrize(&(pseudo_inverse(&lhs, 1e-14)? * rhs));
            let k = b.transpose() * p;
            if !is_hurwitz(&(a - b * &k), VERIFY_MARGIN)?.hurwitz {
                return Err(LinalgError::NotStabilizable);
            }
            return Ok(k);
        }
    }
    Err(LinalgError::NoConvergence("Hamiltonian sign iteration"))
}

/// Solve the continuous-time algebraic Riccati equation
/// `AᵀP + PA − PBBᵀP + Q = 0` by Newton–Kleinman iteration.
///
/// Each Newton step solves the Lyapunov equation
/// `(A − BK)ᵀP + P(A − BK) = −(Q + KᵀK)` and updates `K = BᵀP`. The first
/// gain comes from the Hamiltonian sign function, or from Bass's construction
/// when that iteration fails.
pub fn solve_care(a: &Mat, b: &Mat, q: &Mat) -> Result<CareSolution> {
    ensure_square(a, "A")?;
    let n = a.nrows();
    ensure_shape(b, n, b.ncols(), "B")?;
    ensure_shape(q, n, n, "Q")?;
    if !is_stabilizable(a, b)? {
        return Err(LinalgError::NotStabilizable);
    }
    let mut k = match sign_function_seed(a, b, q) {
        Ok(k) => k,
        Err(_) => stabilizing_seed(a, b)?,
    };
    // Tolerances follow the size of the terms being cancelled, so badly
    // scaled problems are judged by relative accuracy.
    let term_scale = |p: &Mat| 1.0 + q.norm() + 2.0 * a.norm() * p.norm() + (p * b).norm_squared();

    let mut best: Option<CareSolution> = None;
    for it in 1..=MAX_NEWTON_STEPS {
        let closed = a - b * &k;
        let p = match solve_lyapunov(&closed, &(q + k.transpose() * &k)) {
            Ok(p) => p,
            Err(LinalgError::NotHurwitz(_)) => break,
            Err(e) => return Err(e),
        };
        let residual = care_residual(a, b, q, &p);
        let (accept, target) = (1e-9 * term_scale(&p), 1e-13 * term_scale(&p));
        k = b.transpose() * &p;
        let improved = best.as_ref().is_none_or(|s| residual < 0.5 * s.residual_norm);
        if best.as_ref().is_none_or(|s| residual < s.residual_norm) {
            best = Some(CareSolution {
                p,
                residual_norm: residual,
                iterations: it,
            });
        }
        if residual <= target || (!improved && residual <= accept) {
            break;
        }
    }
    match best {
        Some(sol) if sol.residual_norm <= 1e-9 * term_scale(&sol.p) => {
            let closed = a - b * b.transpose() * &sol.p;
            if !is_hurwitz(&closed, VERIFY_MARGIN)?.hurwitz {
                return Err(LinalgError::NoConvergence("Newton–Kleinman iteration"));
            }
            Ok(sol)
        }
        _ => Err(LinalgError::NoConvergence("Newton–Kleinman iteration")),
    }
}

/// Solve `AQ + QAᵀ − 2β·QCᵀCQ + I = 0` by transposing into CARE form
/// `solve_care(Aᵀ, Cᵀ√(2β), I)`.
pub fn solve_filter_care(a_shifted: &Mat, c: &Mat, beta: f64) -> Result<CareSolution> {
    ensure_square(a_shifted, "A")?;
    let n = a_shifted.nrows();
    let scaled = c.transpose() * (2.0 * beta).sqrt();
    let mut sol = solve_care(&a_shifted.transpose(), &scaled, &Mat::identity(n, n))?;
    sol.residual_norm = filter_care_residual(a_shifted, c, beta, &sol.p);
    Ok(sol)
}

/// Gain `K` with `A + K·C` Hurwitz with margin at least 0.1, from the dual
/// Riccati equation `A·P + P·Aᵀ − P·CᵀC·P + I = 0`, `K = −P·Cᵀ`.
pub fn stabilizing_output_injection(a: &Mat, c: &Mat) -> Result<Mat> {
    ensure_square(a, "A")?;
    ensure_shape(c, c.nrows(), a.nrows(), "C")?;
    if !is_detectable(a, c)? {
        return Err(LinalgError::NotDetectable);
    }
    let gain = stabilizing_state_feedback(&a.transpose(), &c.transpose()).map_err(|e| match e {
        LinalgError::NotStabilizable => LinalgError::NotDetectable,
        other => other,
    })?;
    Ok(gain.transpose())
}

/// Gain `K` with `A + B·K` Hurwitz with margin at least 0.1, `K = −BᵀP` from
/// `solve_care(A + μI, B, I)`. The shift `μ` starts at zero and grows until
/// the margin is met.
pub fn stabilizing_state_feedback(a: &Mat, b: &Mat) -> Result<Mat> {
    ensure_square(a, "A")?;
    let n = a.nrows();
    let mut shift = 0.0;
    for _ in 0..8 {
        let shifted = a + Mat::identity(n, n) * shift;
        let sol = solve_care(&shifted, b, &Mat::identity(n, n))?;
        let k = -(b.transpose() * &sol.p);
        if is_hurwitz(&(a + b * &k), DESIGN_MARGIN)?.hurwitz {
            return Ok(k);
        }
        shift = if shift == 0.0 { DESIGN_MARGIN } else { shift * 2.0 };
    }
    Err(LinalgError::NoConvergence("margin-shifted Riccati design"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Mat {
        Mat::from_row_slice(rows, cols, data)
    }

    #[test]
    fn scalar_care() {
        let sol = solve_care(&m(1, 1, &[0.0]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0])).unwrap();
        assert_abs_diff_eq!(sol.p[(0, 0)], 1.0, epsilon = 1e-12);
        let sol = solve_care(&m(1, 1, &[-1.0]), &m(1, 1, &[0.0]), &m(1, 1, &[1.0])).unwrap();
        assert_abs_diff_eq!(sol.p[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn double_integrator_care_closed_form() {
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let q = Mat::identity(2, 2);
        let sol = solve_care(&a, &b, &q).unwrap();
        let s3 = 3f64.sqrt();
        assert_abs_diff_eq!(sol.p, m(2, 2, &[s3, 1.0, 1.0, s3]), epsilon = 1e-10);
        assert!(sol.residual_norm <= 1e-9 * (1.0 + q.norm()));
    }

    #[test]
    fn unstabilizable_is_rejected() {
        let err = solve_care(&m(1, 1, &[1.0]), &m(1, 1, &[0.0]), &m(1, 1, &[1.0])).unwrap_err();
        assert_eq!(err, LinalgError::NotStabilizable);
    }

    #[test]
    fn filter_care_examples() {
        let q = solve_filter_care(&m(1, 1, &[0.0]), &m(1, 1, &[1.0]), 0.5).unwrap();
        assert_abs_diff_eq!(q.p[(0, 0)], 1.0, epsilon = 1e-12);
        let q = solve_filter_care(&m(1, 1, &[0.0]), &m(1, 1, &[1.0]), 2.0).unwrap();
        assert_abs_diff_eq!(q.p[(0, 0)], 0.5, epsilon = 1e-12);

        let chain = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let c = m(1, 2, &[1.0, 0.0]);
        let q = solve_filter_care(&chain, &c, 1.0).unwrap();
        assert!(filter_care_residual(&chain, &c, 1.0, &q.p) <= 1e-9);
        assert!(q.p.clone().cholesky().is_some());
    }

    #[test]
    fn output_injection_examples() {
        let k = stabilizing_output_injection(&m(1, 1, &[0.0]), &m(1, 1, &[1.0])).unwrap();
        assert_abs_diff_eq!(k[(0, 0)], -1.0, epsilon = 1e-12);

        let a = m(1, 1, &[-5.0]);
        let c = m(1, 1, &[1.0]);
        let k = stabilizing_output_injection(&a, &c).unwrap();
        assert!(is_hurwitz(&(&a + &k * &c), DESIGN_MARGIN).unwrap().hurwitz);

        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let c = m(1, 2, &[1.0, 0.0]);
        let k = stabilizing_output_injection(&a, &c).unwrap();
        assert!(is_hurwitz(&(&a + &k * &c), DESIGN_MARGIN).unwrap().hurwitz);

        assert_eq!(
            stabilizing_output_injection(&a, &m(1, 2, &[0.0, 0.0])).unwrap_err(),
            LinalgError::NotDetectable
        );
    }

    #[test]
    fn closed_loop_of_double_integrator_design_is_hurwitz() {
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let sol = solve_care(&a, &b, &Mat::identity(2, 2)).unwrap();
        let closed = &a - &b * b.transpose() * &sol.p;
        assert!(is_hurwitz(&closed, VERIFY_MARGIN).unwrap().hurwitz);
    }
}
