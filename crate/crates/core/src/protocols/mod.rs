//! Protocol synthesis.
//!
//! Three families are supported:
//!
//! * [`StaticProtocol`]: `u_i = F ζ_i` with `F = −ρBᵀP` for full-state coupling.
//! * [`DynamicProtocol`]: an observer-based controller with a low-gain Riccati
//!   feedback for partial-state coupling.
//! * [`HeteroProtocol`]: per-agent observers in chain form plus output-regulation
//!   feedback for heterogeneous agents.
//!
//! Every design is deterministic in its inputs.

mod dynamic_partial;
mod hetero;
mod static_full;

pub use dynamic_partial::{design_dynamic_partial_state, DeltaCertificate, DynamicProtocol};
pub use hetero::{
    build_chain_form, design_hetero_feedback, design_hetero_observer, design_heterogeneous, hetero_error_system,
    hetero_transform, ChainForm, ErrorSystem, HeteroAgentController, HeteroFeedback, HeteroKnobs, HeteroObserver,
    HeteroProtocol, HeteroTransform, ObserverCertificate,
};
pub use static_full::{design_static_full_state, StaticProtocol};

pub use crate::matops::rosenbrock_rank_check;

use thiserror::Error;

use crate::matops::{self, LinalgError, Mat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid design input: {0}")]
    InvalidInput(String),
    #[error("assumption violated: {0}")]
    AssumptionViolation(String),
    #[error("pair (A, B) is not stabilizable")]
    NotStabilizable,
    #[error("pair (A, C) is not detectable")]
    NotDetectable,
    #[error("pair (A, C) is not observable")]
    NotObservable,
    #[error("no admissible low-gain parameter found (last tried delta = {last:.3e})")]
    NoDeltaFound { last: f64 },
    #[error("no admissible high-gain observer parameter found (last tried epsilon = {last:.3e})")]
    NoEpsilonFound { last: f64 },
    #[error("regulator equations are not solvable: invariant zero coincides with an exosystem eigenvalue")]
    RankDeficient,
    #[error("could not complete the null-space basis to a nonsingular matrix")]
    CompletionFailed,
    #[error("design certificate failed: {0}")]
    CertificateFailed(String),
    #[error(transparent)]
    Linalg(LinalgError),
}

impl From<LinalgError> for DesignError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::NotStabilizable => DesignError::NotStabilizable,
            LinalgError::NotDetectable => DesignError::NotDetectable,
            LinalgError::NotObservable => DesignError::NotObservable,
            LinalgError::RankDeficient => DesignError::RankDeficient,
            LinalgError::DimensionMismatch(s) => DesignError::DimensionMismatch(s),
            other => DesignError::Linalg(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, DesignError>;

/// Linear agent `ẋ = Ax + Bu`, `y = Cx`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
}

impl AgentModel {
    pub fn new(a: Mat, b: Mat, c: Mat) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || n == 0 {
            return Err(DesignError::DimensionMismatch(format!(
                "A must be square and nonempty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(DesignError::DimensionMismatch(format!(
                "B must have {n} rows and at least one column, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(DesignError::DimensionMismatch(format!(
                "C must have {n} columns and at least one row, got {}x{}",
                c.nrows(),
                c.ncols()
            )));
        }
        Ok(Self { a, b, c })
    }

    /// Full-state agent, `C = I`.
    pub fn full_state(a: Mat, b: Mat) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, b, Mat::identity(n, n))
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }
}

/// Spectrum of `a` must lie in the closed left half plane.
pub(crate) fn check_closed_left_half_plane(a: &Mat) -> Result<()> {
    let abscissa = matops::spectral_abscissa(a)?;
    if abscissa > 1e-7 * (1.0 + a.norm()) {
        return Err(DesignError::AssumptionViolation(format!(
            "A has an eigenvalue in the open right half plane (abscissa {abscissa:.6})"
        )));
    }
    Ok(())
}

/// `n` points spread evenly over `[lo, hi]`, both ends included.
pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n)
        .map(|k| if k == n - 1 { hi } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 })
        .collect()
}
