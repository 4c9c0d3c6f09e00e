//! Dense linear-algebra kernels behind the protocol designs.
//!
//! Everything here works on small dynamically sized matrices (`n` up to a few
//! dozen). Sylvester and Lyapunov equations are vectorized into Kronecker
//! systems, Riccati equations are solved by Newton–Kleinman iteration, and the
//! spectral routines sit on top of nalgebra's Schur and SVD factorizations.

mod riccati;
mod spectral;
mod sylvester;

pub use riccati::{
    care_residual, filter_care_residual, solve_care, solve_filter_care, stabilizing_output_injection,
    stabilizing_state_feedback, CareSolution,
};
pub use spectral::{
    eigenvalues, is_detectable, is_hurwitz, is_observable, is_stabilizable, matrix_exponential,
    null_space_basis, numerical_rank, observability_matrix, pseudo_inverse, rosenbrock_rank_check,
    singular_values, spectral_abscissa, symmetric_max_eigenvalue, HurwitzCheck,
};
pub use sylvester::{regulator_residuals, solve_lyapunov, solve_regulator, solve_sylvester};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Real dense matrix used throughout the crate.
pub type Mat = DMatrix<f64>;
/// Real dense column vector.
pub type Vector = DVector<f64>;

/// Margin used when verifying that a designed closed loop is Hurwitz.
pub const VERIFY_MARGIN: f64 = 1e-9;
/// Margin demanded from gains this crate designs itself.
pub const DESIGN_MARGIN: f64 = 0.1;
/// Relative singular-value threshold for null spaces and rank decisions.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("Sylvester pencil is numerically singular: A and -B share an eigenvalue")]
    SingularPencil,
    #[error("matrix is not Hurwitz (spectral abscissa {0:.3e})")]
    NotHurwitz(f64),
    #[error("pair (A, B) is not stabilizable")]
    NotStabilizable,
    #[error("pair (A, C) is not detectable")]
    NotDetectable,
    #[error("pair (A, C) is not observable")]
    NotObservable,
    #[error("{0} did not converge")]
    NoConvergence(&'static str),
    #[error("Rosenbrock system matrix loses rank at an exosystem eigenvalue")]
    RankDeficient,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix exponential overflowed")]
    Overflow,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

pub(crate) fn ensure_square(m: &Mat, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn ensure_shape(m: &Mat, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(LinalgError::DimensionMismatch(format!(
            "{what} must be {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Block-diagonal concatenation.
pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Assemble a matrix from a row-major grid of blocks. Every block in a grid
/// row must share its row count, and every block in a grid column its column
/// count.
pub fn block(grid: &[&[&Mat]]) -> Mat {
    let rows: usize = grid.iter().map(|row| row[0].nrows()).sum();
    let cols: usize = grid[0].iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for row in grid {
        let mut c = 0;
        for b in row.iter() {
            out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
            c += b.ncols();
        }
        r += row[0].nrows();
    }
    out
}
