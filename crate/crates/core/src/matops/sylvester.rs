use nalgebra::DVector;

use super::spectral::{eigenvalues, is_hurwitz, pseudo_inverse, rosenbrock_rank_check};
use super::{ensure_shape, ensure_square, symmetrize, LinalgError, Mat, Result, VERIFY_MARGIN};

// Full-pivot LU pivots smaller than this fraction of the largest are zero.
const PIVOT_RTOL: f64 = 1e-13;

/// Solve `A·X + X·B = C` through the Kronecker system
/// `(I ⊗ A + Bᵀ ⊗ I) vec X = vec C`.
pub fn solve_sylvester(a: &Mat, b: &Mat, c: &Mat) -> Result<Mat> {
    ensure_square(a, "A")?;
    ensure_square(b, "B")?;
    let (n, m) = (a.nrows(), b.nrows());
    ensure_shape(c, n, m, "C")?;
    if n == 0 || m == 0 {
        return Ok(Mat::zeros(n, m));
    }
    let k = Mat::identity(m, m).kronecker(a) + b.transpose().kronecker(&Mat::identity(n, n));
    let lu = k.clone().full_piv_lu();
    let u = lu.u();
    let pivots: Vec<f64> = u.diagonal().iter().map(|v| v.abs()).collect();
    let pmax = pivots.iter().copied().fold(0.0, f64::max);
    let pmin = pivots.iter().copied().fold(f64::INFINITY, f64::min);
    if pmax == 0.0 || pmin <= PIVOT_RTOL * pmax {
        return Err(LinalgError::SingularPencil);
    }
    let rhs = DVector::from_column_slice(c.as_slice());
    let mut x = lu.solve(&rhs).ok_or(LinalgError::SingularPencil)?;
    // one step of iterative refinement
    let r = &rhs - &k * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    Ok(Mat::from_column_slice(n, m, x.as_slice()))
}

/// Solve `Aᵀ·X + X·A = −Q` for Hurwitz `A`.
pub fn solve_lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    ensure_square(a, "A")?;
    ensure_shape(q, a.nrows(), a.nrows(), "Q")?;
    let check = is_hurwitz(a, VERIFY_MARGIN)?;
    if !check.hurwitz {
        return Err(LinalgError::NotHurwitz(check.abscissa));
    }
    let x = solve_sylvester(&a.transpose(), a, &(-q))?;
    Ok(symmetrize(&x))
}

/// Solve the regulator equations
///
/// ```text
/// Π·A22 = A·Π + A12 + B·Γ
///   C·Π = C2
/// ```
///
/// as one stacked linear system in `(vec Π, vec Γ)`. When `B` has more
/// columns than `C` has rows the solution is not unique and the minimum-norm
/// one is returned.
pub fn solve_regulator(a: &Mat, b: &Mat, c: &Mat, a12: &Mat, a22: &Mat, c2: &Mat) -> Result<(Mat, Mat)> {
    ensure_square(a, "A_i")?;
    ensure_square(a22, "A22")?;
    let (n, m, p, k) = (a.nrows(), b.ncols(), c.nrows(), a22.nrows());
    ensure_shape(b, n, m, "B_i")?;
    ensure_shape(c, p, n, "C_i")?;
    ensure_shape(a12, n, k, "A12")?;
    ensure_shape(c2, p, k, "C2")?;
    if k == 0 {
        return Ok((Mat::zeros(n, 0), Mat::zeros(m, 0)));
    }
    for lambda in eigenvalues(a22)? {
        if !rosenbrock_rank_check(a, b, c, lambda)? {
            return Err(LinalgError::RankDeficient);
        }
    }

    let ik = Mat::identity(k, k);
    let in_ = Mat::identity(n, n);
    let rows = n * k + p * k;
    let cols = n * k + m * k;
    let mut sys = Mat::zeros(rows, cols);
    // vec(Π A22 − A Π) = (A22ᵀ ⊗ I − I ⊗ A) vec Π ; vec(B Γ) = (I ⊗ B) vec Γ
    let pi_block = a22.transpose().kronecker(&in_) - ik.kronecker(a);
    sys.view_mut((0, 0), (n * k, n * k)).copy_from(&pi_block);
    sys.view_mut((0, n * k), (n * k, m * k)).copy_from(&(-ik.kronecker(b)));
    sys.view_mut((n * k, 0), (p * k, n * k)).copy_from(&ik.kronecker(c));
    let mut rhs = DVector::zeros(rows);
    rhs.rows_mut(0, n * k).copy_from_slice(a12.as_slice());
    rhs.rows_mut(n * k, p * k).copy_from_slice(c2.as_slice());

    let sol = pseudo_inverse(&sys, 1e-12)? * &rhs;
    let pi = Mat::from_column_slice(n, k, &sol.as_slice()[..n * k]);
    let gamma = Mat::from_column_slice(m, k, &sol.as_slice()[n * k..]);

    let tol = 1e-8 * (1.0 + a12.norm() + c2.norm());
    let (r1, r2) = regulator_residuals(a, b, c, a12, a22, c2, &pi, &gamma);
    if r1 > tol || r2 > tol {
        return Err(LinalgError::RankDeficient);
    }
    Ok((pi, gamma))
}

/// Frobenius norms of the two regulator-equation residuals.
#[allow(clippy::too_many_arguments)]
pub fn regulator_residuals(
    a: &Mat,
    b: &Mat,
    c: &Mat,
    a12: &Mat,
    a22: &Mat,
    c2: &Mat,
    pi: &Mat,
    gamma: &Mat,
) -> (f64, f64) {
    let r1 = (pi * a22 - a * pi - a12 - b * gamma).norm();
    let r2 = (c * pi - c2).norm();
    (r1, r2)
}
