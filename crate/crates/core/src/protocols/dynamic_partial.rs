use super::{check_closed_left_half_plane, linspace, DesignError, Result};
use crate::exec::{self, Execution};
use crate::matops::{self, block, Mat, VERIFY_MARGIN};

const DELTA_GRID: usize = 20;
const MAX_HALVINGS: usize = 60;

/// Grid certificate recorded when a low-gain parameter is accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaCertificate {
    pub halvings: usize,
    /// `(ℓ, spectral abscissa)` of the error-coordinate closed loop.
    pub grid: Vec<(f64, f64)>,
}

/// Observer-based protocol
///
/// ```text
/// χ̇_i = A_c χ_i + B_c ζ_i
/// u_i = C_c χ_i + D_c ζ_i
/// ```
///
/// with `A_c = A + KC`, `B_c = −K`, `C_c = −β⁻¹BᵀP_δ` and `D_c = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicProtocol {
    pub a_c: Mat,
    pub b_c: Mat,
    pub c_c: Mat,
    pub d_c: Mat,
    pub delta: f64,
    pub k: Mat,
    pub p_delta: Mat,
    pub beta: f64,
    pub alpha: f64,
    pub certificate: DeltaCertificate,
}

// [[A − gBBᵀP, gBBᵀP], [−gBBᵀP, A + KC + gBBᵀP]] with g = ℓ/β, the closed loop
// in (x̃, e = x̃ − χ̃) coordinates.
fn error_coordinate_loop(a: &Mat, b: &Mat, c: &Mat, k: &Mat, p_delta: &Mat, gain: f64) -> Mat {
    let g = b * b.transpose() * p_delta * gain;
    let top_left = a - &g;
    let bottom_right = a + k * c + &g;
    let neg = -&g;
    block(&[&[&top_left, &g], &[&neg, &bottom_right]])
}

impl DynamicProtocol {
    /// Closed loop of the `i`-th decoupled subsystem in `(x̃, e)` coordinates.
    pub fn error_coordinate_loop(&self, a: &Mat, b: &Mat, c: &Mat, ell: f64) -> Mat {
        error_coordinate_loop(a, b, c, &self.k, &self.p_delta, ell / self.beta)
    }

    /// `Ā + ℓB̄C̄` with `Ā = [[A, BC_c], [0, A_c]]`, `B̄ = [BD_c; B_c]`, `C̄ = [C, 0]`.
    pub fn subsystem_matrix(&self, a: &Mat, b: &Mat, c: &Mat, ell: f64) -> Mat {
        let a_bar = self.closed_loop_generator(a, b);
        let b_bar = block(&[&[&(b * &self.d_c)], &[&self.b_c]]);
        let c_bar = block(&[&[c, &Mat::zeros(c.nrows(), self.a_c.nrows())]]);
        a_bar + b_bar * c_bar * ell
    }

    /// `Ā = [[A, BC_c], [0, A_c]]`, the generator of the root's augmented state.
    pub fn closed_loop_generator(&self, a: &Mat, b: &Mat) -> Mat {
        let zero = Mat::zeros(self.a_c.nrows(), a.ncols());
        block(&[&[a, &(b * &self.c_c)], &[&zero, &self.a_c]])
    }
}

/// Low-gain observer-based protocol for graphs with `β ≤ ℓ_ii ≤ α`.
///
/// `δ` starts at `delta_init` and is halved until the error-coordinate closed
/// loop is Hurwitz at every point of a 20-point grid over `[β, α]`.
pub fn design_dynamic_partial_state(
    a: &Mat,
    b: &Mat,
    c: &Mat,
    beta: f64,
    alpha: f64,
    delta_init: f64,
) -> Result<DynamicProtocol> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || c.ncols() != n {
        return Err(DesignError::DimensionMismatch(format!(
            "A {}x{}, B {}x{}, C {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            c.nrows(),
            c.ncols()
        )));
    }
    if !(beta > 0.0 && alpha > beta && alpha.is_finite()) {
        return Err(DesignError::InvalidInput(format!(
            "need alpha > beta > 0, got alpha = {alpha}, beta = {beta}"
        )));
    }
    if !(delta_init.is_finite() && delta_init > 0.0) {
        return Err(DesignError::InvalidInput(format!("delta_init must be positive, got {delta_init}")));
    }
    check_closed_left_half_plane(a)?;
    if !matops::is_stabilizable(a, b)? {
        return Err(DesignError::NotStabilizable);
    }
    if !matops::is_observable(a, c)? {
        return Err(DesignError::NotObservable);
    }

    let k = matops::stabilizing_output_injection(a, c)?;
    let grid = linspace(beta, alpha, DELTA_GRID);
    let mut delta = delta_init;
    for halvings in 0..=MAX_HALVINGS {
        let p_delta = matops::solve_care(a, b, &(Mat::identity(n, n) * delta))?.p;
        let checks = exec::map(Execution::default(), &grid, |&ell| {
            matops::is_hurwitz(&error_coordinate_loop(a, b, c, &k, &p_delta, ell / beta), VERIFY_MARGIN)
                .map(|h| (ell, h))
        });
        let checks = checks.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
        if checks.iter().all(|(_, h)| h.hurwitz) {
            let c_c = -(b.transpose() * &p_delta) / beta;
            return Ok(DynamicProtocol {
                a_c: a + &k * c,
                b_c: -k.clone(),
                d_c: Mat::zeros(b.ncols(), c.nrows()),
                c_c,
                delta,
                k,
                p_delta,
                beta,
                alpha,
                certificate: DeltaCertificate {
                    halvings,
                    grid: checks.into_iter().map(|(ell, h)| (ell, h.abscissa)).collect(),
                },
            });
        }
        if halvings < MAX_HALVINGS {
            delta *= 0.5;
        }
    }
    Err(DesignError::NoDeltaFound { last: delta })
}
