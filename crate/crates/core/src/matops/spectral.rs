use nalgebra::linalg::{Schur, SymmetricEigen, SVD};
use nalgebra::DMatrix;
use num_complex::Complex64;

use super::{ensure_square, LinalgError, Mat, Result, RANK_TOL};

const QR_MAX_ITER: usize = 10_000;
const SVD_MAX_ITER: usize = 10_000;

/// Outcome of a Hurwitz test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HurwitzCheck {
    pub hurwitz: bool,
    pub abscissa: f64,
}

/// Eigenvalues via Hessenberg reduction and Francis double-shift QR.
pub fn eigenvalues(a: &Mat) -> Result<Vec<Complex64>> {
    ensure_square(a, "eigenvalue input")?;
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NoConvergence("Schur QR iteration"));
    }
    // Exactly structured inputs (a nilpotent shift, for one) can stall the
    // unshifted-looking QR sweep; an orthogonal similarity breaks the pattern
    // without moving the spectrum.
    let n = a.nrows();
    let v = Mat::from_fn(n, 1, |i, _| 1.0 + i as f64 / n as f64);
    let reflector = Mat::identity(n, n) - &v * v.transpose() * (2.0 / v.norm_squared());
    let attempts = [
        (a.clone(), f64::EPSILON),
        (&reflector * a * &reflector, f64::EPSILON),
        (&reflector * a * &reflector, 1e-14),
    ];
    for (m, eps) in attempts {
        if let Some(schur) = Schur::try_new(m, eps, QR_MAX_ITER) {
            return Ok(schur.complex_eigenvalues().iter().copied().collect());
        }
    }
    Err(LinalgError::NoConvergence("Schur QR iteration"))
}

/// Largest real part over the spectrum; `-inf` for an empty matrix.
pub fn spectral_abscissa(a: &Mat) -> Result<f64> {
    Ok(eigenvalues(a)?
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// True iff every eigenvalue has real part `< -margin`.
pub fn is_hurwitz(a: &Mat, margin: f64) -> Result<HurwitzCheck> {
    let abscissa = spectral_abscissa(a)?;
    Ok(HurwitzCheck {
        hurwitz: abscissa < -margin,
        abscissa,
    })
}

/// Largest eigenvalue of the symmetric part of `m`.
pub fn symmetric_max_eigenvalue(m: &Mat) -> f64 {
    let sym = super::symmetrize(m);
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

// Pad a wide matrix with zero rows so the SVD returns a full right basis.
fn padded(m: &Mat) -> Mat {
    if m.nrows() >= m.ncols() {
        return m.clone();
    }
    let mut out = Mat::zeros(m.ncols(), m.ncols());
    out.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    out
}

fn svd(m: Mat) -> Result<SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    SVD::try_new(m, true, true, f64::EPSILON, SVD_MAX_ITER)
        .ok_or(LinalgError::NoConvergence("singular value decomposition"))
}

/// Singular values in descending order.
pub fn singular_values(m: &Mat) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    let mut s: Vec<f64> = svd(m.clone())?.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

fn complex_singular_values(m: DMatrix<Complex64>) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    let mut s: Vec<f64> = SVD::try_new(m, false, false, f64::EPSILON, SVD_MAX_ITER)
        .ok_or(LinalgError::NoConvergence("singular value decomposition"))?
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

fn rank_of(sv: &[f64], rtol: f64) -> usize {
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rtol * smax).count()
}

/// Rank with singular values below `rtol · σ_max` counted as zero.
pub fn numerical_rank(m: &Mat, rtol: f64) -> Result<usize> {
    Ok(rank_of(&singular_values(m)?, rtol))
}

/// Orthonormal basis (as columns) of the numerical null space of `m`.
///
/// Singular values below `tol · σ_max` count as zero; a zero matrix has the
/// identity as its null-space basis.
pub fn null_space_basis(m: &Mat, tol: f64) -> Result<Mat> {
    let n = m.ncols();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    if m.nrows() == 0 {
        return Ok(Mat::identity(n, n));
    }
    let dec = svd(padded(m))?;
    let v_t = dec.v_t.as_ref().expect("right singular vectors requested");
    let smax = dec.singular_values.max();
    let null_rows: Vec<usize> = (0..n)
        .filter(|&i| smax <= 0.0 || dec.singular_values[i] < tol * smax)
        .collect();
    let mut basis = Mat::zeros(n, null_rows.len());
    for (col, &row) in null_rows.iter().enumerate() {
        basis.set_column(col, &v_t.row(row).transpose());
    }
    Ok(basis)
}

/// Moore–Penrose pseudo-inverse with relative cutoff `rtol`.
pub fn pseudo_inverse(m: &Mat, rtol: f64) -> Result<Mat> {
    if m.is_empty() {
        return Ok(Mat::zeros(m.ncols(), m.nrows()));
    }
    let dec = svd(m.clone())?;
    let smax = dec.singular_values.max();
    let u = dec.u.as_ref().expect("left singular vectors requested");
    let v_t = dec.v_t.as_ref().expect("right singular vectors requested");
    let mut out = Mat::zeros(m.ncols(), m.nrows());
    for (i, &s) in dec.singular_values.iter().enumerate() {
        if smax > 0.0 && s > rtol * smax {
            out += v_t.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    Ok(out)
}

/// Stacked matrix `[C; CA; …; CA^{order-1}]`.
pub fn observability_matrix(a: &Mat, c: &Mat, order: usize) -> Mat {
    let p = c.nrows();
    let mut out = Mat::zeros(p * order, a.ncols());
    let mut block = c.clone();
    for k in 0..order {
        out.view_mut((k * p, 0), (p, a.ncols())).copy_from(&block);
        block = &block * a;
    }
    out
}

fn to_complex(m: &Mat) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

// Rank of [A - λI, B] (columns appended) at every λ kept by `select`.
fn pbh_holds(a: &Mat, other: &Mat, side_by_side: bool, select: impl Fn(&Complex64) -> bool) -> Result<bool> {
    let n = a.nrows();
    for lambda in eigenvalues(a)?.iter().filter(|l| select(l)) {
        let shifted = to_complex(a) - DMatrix::<Complex64>::identity(n, n) * *lambda;
        let other = to_complex(other);
        let pencil = if side_by_side {
            let mut m = DMatrix::<Complex64>::zeros(n, n + other.ncols());
            m.view_mut((0, 0), (n, n)).copy_from(&shifted);
            m.view_mut((0, n), (n, other.ncols())).copy_from(&other);
            m
        } else {
            let mut m = DMatrix::<Complex64>::zeros(n + other.nrows(), n);
            m.view_mut((0, 0), (n, n)).copy_from(&shifted);
            m.view_mut((n, 0), (other.nrows(), n)).copy_from(&other);
            m
        };
        if rank_of(&complex_singular_values(pencil)?, RANK_TOL) < n {
            return Ok(false);
        }
    }
    Ok(true)
}

// Eigenvalues this close to the imaginary axis are treated as marginal.
fn marginal_or_unstable(a: &Mat) -> impl Fn(&Complex64) -> bool {
    let tol = 1e-7 * (1.0 + a.norm());
    move |l: &Complex64| l.re >= -tol
}

pub fn is_stabilizable(a: &Mat, b: &Mat) -> Result<bool> {
    pbh_holds(a, b, true, marginal_or_unstable(a))
}

pub fn is_detectable(a: &Mat, c: &Mat) -> Result<bool> {
    pbh_holds(a, c, false, marginal_or_unstable(a))
}

pub fn is_observable(a: &Mat, c: &Mat) -> Result<bool> {
    pbh_holds(a, c, false, |_| true)
}

/// True iff `rank [[A − λI, B], [C, 0]] = n + p` at relative tolerance 1e-8.
pub fn rosenbrock_rank_check(a: &Mat, b: &Mat, c: &Mat, lambda: Complex64) -> Result<bool> {
    let (n, m, p) = (a.nrows(), b.ncols(), c.nrows());
    let mut r = DMatrix::<Complex64>::zeros(n + p, n + m);
    r.view_mut((0, 0), (n, n))
        .copy_from(&(to_complex(a) - DMatrix::<Complex64>::identity(n, n) * lambda));
    r.view_mut((0, n), (n, m)).copy_from(&to_complex(b));
    r.view_mut((n, 0), (p, n)).copy_from(&to_complex(c));
    Ok(rank_of(&complex_singular_values(r)?, RANK_TOL) == n + p)
}

/// `e^{At}` by scaling and squaring with a Padé approximant.
pub fn matrix_exponential(a: &Mat, t: f64) -> Result<Mat> {
    ensure_square(a, "matrix exponential input")?;
    if t == 0.0 || a.nrows() == 0 {
        return Ok(Mat::identity(a.nrows(), a.ncols()));
    }
    let scaled = a * t;
    if scaled.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::Overflow);
    }
    let out = scaled.exp();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::Overflow);
    }
    Ok(out)
}
