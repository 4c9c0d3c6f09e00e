//! Heterogeneous output synchronization via a chain-form observer and
//! output-regulation feedback.
//!
//! For each non-root agent `i` the pair (agent `i`, root) is reduced to an
//! observable error system `x̄_i`, rewritten in chain form `φ_i = Ξ_i x̄_i`,
//! estimated by a high-gain observer driven by the network signal and fed back
//! through `u_i = F_i x̂̄_i` where `F_i` solves the regulator equations.

use super::{check_closed_left_half_plane, AgentModel, DesignError, Result};
use crate::matops::{self, block, block_diag, Mat, RANK_TOL, VERIFY_MARGIN};
use crate::netgraph::SpanningTreeNetwork;

const MAX_HALVINGS: usize = 60;
const CONJUGATION_TOL: f64 = 1e-8;

/// Stacked pair `(agent i, root)` with output `e_i = C_i x_i − C_1 x_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSystem {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
}

pub fn hetero_error_system(agent: &AgentModel, root: &AgentModel) -> Result<ErrorSystem> {
    if agent.p() != root.p() {
        return Err(DesignError::DimensionMismatch(format!(
            "output dimensions differ: {} vs root {}",
            agent.p(),
            root.p()
        )));
    }
    Ok(ErrorSystem {
        a: block_diag(&[&agent.a, &root.a]),
        b: block(&[&[&agent.b], &[&Mat::zeros(root.n(), agent.m())]]),
        c: block(&[&[&agent.c, &(-&root.c)]]),
    })
}

/// Observable reduction of the error system.
///
/// `x̄_i = T·(x̃_i, x̃_1)` with
/// `T = [[I, −Λ_i M_i Φ_i⁻¹], [0, −N_i Φ_i⁻¹]]`, and
/// `Ā_i = [[A_i, Ā₁₂], [0, Ā₂₂]]`, `B̄_i = [B_i; 0]`, `C̄_i = [C_i, −C̄₂]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroTransform {
    pub lambda: Mat,
    pub phi: Mat,
    pub m: Mat,
    pub n: Mat,
    pub q: usize,
    pub k: usize,
    pub t: Mat,
    pub a_bar: Mat,
    pub b_bar: Mat,
    pub c_bar: Mat,
    pub a12: Mat,
    pub a22: Mat,
    pub c2: Mat,
    /// `max(‖ĀT − TA_z‖, ‖C̄T − C_z‖, ‖TB_z − B̄‖)`.
    pub conjugation_residual: f64,
}

// Append identity columns greedily, each time taking the one that maximizes
// the smallest singular value (ties to the lowest index).
fn complete_basis(partial: &Mat) -> Result<Mat> {
    let n = partial.nrows();
    let mut current = partial.clone();
    let mut used = vec![false; n];
    while current.ncols() < n {
        let mut best: Option<(usize, f64, Mat)> = None;
        for j in (0..n).filter(|&j| !used[j]) {
            let mut candidate = current.clone().insert_column(current.ncols(), 0.0);
            candidate[(j, current.ncols())] = 1.0;
            let smin = matops::singular_values(&candidate)?.last().copied().unwrap_or(0.0);
            if best.as_ref().is_none_or(|(_, s, _)| smin > *s) {
                best = Some((j, smin, candidate));
            }
        }
        let (j, _, candidate) = best.ok_or(DesignError::CompletionFailed)?;
        used[j] = true;
        current = candidate;
    }
    let smin = matops::singular_values(&current)?.last().copied().unwrap_or(1.0);
    if n > 0 && smin < 1e-10 {
        return Err(DesignError::CompletionFailed);
    }
    Ok(current)
}

fn inverse(m: &Mat) -> Result<Mat> {
    m.clone().try_inverse().ok_or(DesignError::CompletionFailed)
}

pub fn hetero_transform(agent: &AgentModel, root: &AgentModel) -> Result<HeteroTransform> {
    let sys = hetero_error_system(agent, root)?;
    if !matops::is_observable(&agent.a, &agent.c)? || !matops::is_observable(&root.a, &root.c)? {
        return Err(DesignError::NotObservable);
    }
    let (ni, n1) = (agent.n(), root.n());
    let o = matops::observability_matrix(&sys.a, &sys.c, ni + n1);
    let null = matops::null_space_basis(&o, RANK_TOL)?;
    let q = null.ncols();
    if q > ni.min(n1) {
        return Err(DesignError::CompletionFailed);
    }
    let k = n1 - q;
    let lambda_u = null.rows(0, ni).into_owned();
    let phi_u = null.rows(ni, n1).into_owned();
    if matops::numerical_rank(&lambda_u, RANK_TOL)? != q || matops::numerical_rank(&phi_u, RANK_TOL)? != q {
        return Err(DesignError::NotObservable);
    }
    let lambda = complete_basis(&lambda_u)?;
    let phi = complete_basis(&phi_u)?;
    let phi_inv = inverse(&phi)?;

    let mut m = Mat::zeros(ni, n1);
    for d in 0..q {
        m[(d, d)] = 1.0;
    }
    let mut n = Mat::zeros(k, n1);
    for d in 0..k {
        n[(d, q + d)] = 1.0;
    }

    let lm = &lambda * &m;
    let t = block(&[
        &[&Mat::identity(ni, ni), &(-(&lm * &phi_inv))],
        &[&Mat::zeros(k, ni), &(-(&n * &phi_inv))],
    ]);
    let a1_phi = &root.a * &phi;
    let a12 = (&lm * &phi_inv * &a1_phi - &agent.a * &lm) * n.transpose();
    let a22 = &n * &phi_inv * &a1_phi * n.transpose();
    let c2 = (&agent.c * &lm - &root.c * &phi) * n.transpose();

    let a_bar = block(&[&[&agent.a, &a12], &[&Mat::zeros(k, ni), &a22]]);
    let b_bar = block(&[&[&agent.b], &[&Mat::zeros(k, agent.m())]]);
    let c_bar = block(&[&[&agent.c, &(-&c2)]]);

    let conjugation_residual = [
        (&a_bar * &t - &t * &sys.a).norm(),
        (&c_bar * &t - &sys.c).norm(),
        (&t * &sys.b - &b_bar).norm(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let scale = 1.0 + sys.a.norm() + sys.c.norm();
    if conjugation_residual > CONJUGATION_TOL * scale {
        return Err(DesignError::CertificateFailed(format!(
            "observable reduction does not conjugate the error system (residual {conjugation_residual:.3e})"
        )));
    }

    Ok(HeteroTransform {
        lambda,
        phi,
        m,
        n,
        q,
        k,
        t,
        a_bar,
        b_bar,
        c_bar,
        a12,
        a22,
        c2,
        conjugation_residual,
    })
}

/// Chain-form data `φ = Ξ x̄`, `φ̇ = (A_o + K_o)φ + B_o u`, `e = C_o φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainForm {
    pub nbar: usize,
    pub p: usize,
    pub a_o: Mat,
    pub c_o: Mat,
    pub b_o: Mat,
    pub k_o: Mat,
    pub g: Mat,
    pub xi: Mat,
    /// `(ΞᵀΞ)⁻¹Ξᵀ`, the left inverse recovering `x̄` from `φ`.
    pub xi_left_inverse: Mat,
    /// `‖(A_o + K_o)Ξ − ΞĀ‖`.
    pub intertwining_residual: f64,
}

/// Brunovsky chain `A_o` (block shift) and `C_o = [I_p 0]` of length `nbar`.
pub fn brunovsky_pair(p: usize, nbar: usize) -> (Mat, Mat) {
    let dim = p * nbar;
    let mut a_o = Mat::zeros(dim, dim);
    for r in 0..p * (nbar - 1) {
        a_o[(r, r + p)] = 1.0;
    }
    let mut c_o = Mat::zeros(p, dim);
    for r in 0..p {
        c_o[(r, r)] = 1.0;
    }
    (a_o, c_o)
}

pub fn build_chain_form(a_bar: &Mat, b_bar: &Mat, c_bar: &Mat, nbar: usize) -> Result<ChainForm> {
    let dim = a_bar.nrows();
    let p = c_bar.nrows();
    if nbar == 0 || nbar < dim {
        return Err(DesignError::InvalidInput(format!(
            "chain length {nbar} is shorter than the state dimension {dim}"
        )));
    }
    let xi = matops::observability_matrix(a_bar, c_bar, nbar);
    let gram = xi.transpose() * &xi;
    if dim > 0 && matops::numerical_rank(&xi, RANK_TOL)? < dim {
        return Err(DesignError::NotObservable);
    }
    let gram_inv = if dim == 0 {
        Mat::zeros(0, 0)
    } else {
        gram.try_inverse().ok_or(DesignError::NotObservable)?
    };
    let xi_left_inverse = &gram_inv * xi.transpose();
    let a_pow = (0..nbar).fold(Mat::identity(dim, dim), |acc, _| acc * a_bar);
    let g = c_bar * a_pow * &xi_left_inverse;
    let (a_o, c_o) = brunovsky_pair(p, nbar);
    let mut k_o = Mat::zeros(p * nbar, p * nbar);
    k_o.view_mut((p * (nbar - 1), 0), (p, p * nbar)).copy_from(&g);
    let b_o = &xi * b_bar;
    let intertwining_residual = ((&a_o + &k_o) * &xi - &xi * a_bar).norm();
    if intertwining_residual > 1e-8 * (1.0 + xi.norm() * (1.0 + a_bar.norm())) {
        return Err(DesignError::CertificateFailed(format!(
            "chain form does not intertwine (residual {intertwining_residual:.3e})"
        )));
    }
    Ok(ChainForm {
        nbar,
        p,
        a_o,
        c_o,
        b_o,
        k_o,
        g,
        xi,
        xi_left_inverse,
        intertwining_residual,
    })
}

/// Per-agent record of the observer acceptance test.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverCertificate {
    pub agent: usize,
    pub ell: f64,
    /// `2‖K_ε^i Q_ε‖`.
    pub mismatch_norm: f64,
    /// Spectral abscissa of `A_o + K_ε − ℓ_ii Q_ε C_oᵀC_o − K_ε^i`.
    pub abscissa: f64,
}

/// Shared high-gain observer data.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroObserver {
    pub epsilon: f64,
    pub halvings: usize,
    pub h_eps: Mat,
    pub q_eps: Mat,
    pub k_eps: Mat,
    pub k_shape: Mat,
    pub certificates: Vec<ObserverCertificate>,
}

fn h_matrix(p: usize, nbar: usize, eps: f64) -> Mat {
    let mut h = Mat::zeros(p * nbar, p * nbar);
    for blk in 0..nbar {
        let s = eps.powi(-(blk as i32 + 1));
        for r in 0..p {
            h[(blk * p + r, blk * p + r)] = s;
        }
    }
    h
}

// [0; ε^{n̄+1}·row·H_ε] with `row` (p × pn̄) placed in the last block row.
fn last_block_row(p: usize, nbar: usize, eps: f64, row: &Mat, h: &Mat) -> Mat {
    let mut out = Mat::zeros(p * nbar, p * nbar);
    let scaled = row * h * eps.powi(nbar as i32 + 1);
    out.view_mut((p * (nbar - 1), 0), (p, p * nbar)).copy_from(&scaled);
    out
}

/// Search the high-gain parameter `ε` by halving from `epsilon_init`.
///
/// `agents` pairs each non-root agent's chain form with its agent index and
/// `ℓ_ii`. `ε` is accepted once `2‖K_ε^i Q_ε‖ ≤ 1` and the scaled observer
/// error matrix is Hurwitz for every agent.
pub fn design_hetero_observer(
    agents: &[(usize, f64, &ChainForm)],
    beta: f64,
    k_shape: Option<&Mat>,
    epsilon_init: f64,
) -> Result<HeteroObserver> {
    let (p, nbar) = match agents.first() {
        Some((_, _, cf)) => (cf.p, cf.nbar),
        None => return Err(DesignError::InvalidInput("no follower agents".into())),
    };
    if agents.iter().any(|(_, _, cf)| cf.p != p || cf.nbar != nbar) {
        return Err(DesignError::DimensionMismatch("chain forms must share p and nbar".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(DesignError::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    if let Some((agent, ell, _)) = agents.iter().find(|(_, ell, _)| *ell < beta) {
        return Err(DesignError::InvalidInput(format!(
            "l_ii = {ell} of agent {} is below beta = {beta}",
            agent + 1
        )));
    }
    if !(epsilon_init > 0.0 && epsilon_init.is_finite()) {
        return Err(DesignError::InvalidInput(format!(
            "epsilon_init must be positive, got {epsilon_init}"
        )));
    }
    let dim = p * nbar;
    let k_shape = match k_shape {
        Some(k) if k.shape() == (p, dim) => k.clone(),
        Some(k) => {
            return Err(DesignError::DimensionMismatch(format!(
                "observer K must be {p}x{dim}, got {}x{}",
                k.nrows(),
                k.ncols()
            )))
        }
        None => Mat::zeros(p, dim),
    };
    let (a_o, c_o) = brunovsky_pair(p, nbar);
    let ctc = c_o.transpose() * &c_o;

    let mut eps = epsilon_init;
    for halvings in 0..=MAX_HALVINGS {
        let h = h_matrix(p, nbar, eps);
        let k_eps = last_block_row(p, nbar, eps, &k_shape, &h);
        let shifted = &a_o + &k_eps;
        if !matops::is_observable(&shifted, &c_o)? {
            return Err(DesignError::NotObservable);
        }
        let q_eps = matops::solve_filter_care(&shifted, &c_o, beta)?.p;

        let mut certificates = Vec::with_capacity(agents.len());
        for &(agent, ell, cf) in agents {
            let k_eps_i = last_block_row(p, nbar, eps, &(&k_shape - &cf.g), &h);
            let mismatch_norm = 2.0 * matops::singular_values(&(&k_eps_i * &q_eps))?[0];
            let observer = &shifted - &q_eps * &ctc * ell - &k_eps_i;
            let abscissa = matops::spectral_abscissa(&observer)?;
            certificates.push(ObserverCertificate {
                agent,
                ell,
                mismatch_norm,
                abscissa,
            });
        }
        if certificates
            .iter()
            .all(|c| c.mismatch_norm <= 1.0 && c.abscissa < -VERIFY_MARGIN)
        {
            return Ok(HeteroObserver {
                epsilon: eps,
                halvings,
                h_eps: h,
                q_eps,
                k_eps,
                k_shape,
                certificates,
            });
        }
        if halvings < MAX_HALVINGS {
            eps *= 0.5;
        }
    }
    Err(DesignError::NoEpsilonFound { last: eps })
}

/// Output-regulation feedback `F_i = [K_i, Γ_i − K_iΠ_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroFeedback {
    pub pi: Mat,
    pub gamma: Mat,
    pub k: Mat,
    pub f: Mat,
    /// Regulator-equation residuals `(‖ΠA₂₂ − AΠ − A₁₂ − BΓ‖, ‖CΠ − C̄₂‖)`.
    pub regulator_residuals: (f64, f64),
}

pub fn design_hetero_feedback(agent: &AgentModel, a12: &Mat, a22: &Mat, c2: &Mat) -> Result<HeteroFeedback> {
    let k = matops::stabilizing_state_feedback(&agent.a, &agent.b)?;
    let kdim = a22.nrows();
    if kdim == 0 {
        return Ok(HeteroFeedback {
            pi: Mat::zeros(agent.n(), 0),
            gamma: Mat::zeros(agent.m(), 0),
            f: k.clone(),
            k,
            regulator_residuals: (0.0, 0.0),
        });
    }
    let (pi, gamma) = matops::solve_regulator(&agent.a, &agent.b, &agent.c, a12, a22, c2)?;
    let regulator_residuals =
        matops::regulator_residuals(&agent.a, &agent.b, &agent.c, a12, a22, c2, &pi, &gamma);
    let f = block(&[&[&k, &(&gamma - &k * &pi)]]);
    Ok(HeteroFeedback {
        pi,
        gamma,
        k,
        f,
        regulator_residuals,
    })
}

/// Everything agent `i ≥ 2` runs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroAgentController {
    pub agent: usize,
    pub transform: HeteroTransform,
    pub chain: ChainForm,
    pub feedback: HeteroFeedback,
    /// `H_ε Q_ε C_oᵀ`, the observer injection gain.
    pub injection: Mat,
    /// `F_i (ΞᵀΞ)⁻¹Ξᵀ`, mapping the observer state to the input.
    pub input_map: Mat,
}

/// Complete heterogeneous design over a tree. `controllers[0]` is `None`: the
/// root runs `u_1 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroProtocol {
    pub nbar: usize,
    pub p: usize,
    pub observer: HeteroObserver,
    pub controllers: Vec<Option<HeteroAgentController>>,
}

/// Design knobs for [`design_heterogeneous`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeteroKnobs {
    /// Chain length; defaults to `max_i n_i + n_1`.
    pub nbar: Option<usize>,
    /// Observer shaping matrix `K` (`p × p·n̄`); defaults to zero.
    pub k_shape: Option<Mat>,
    pub epsilon_init: f64,
}

// Normal rank of the Rosenbrock matrix, sampled at a point off the real axis.
fn right_invertible(agent: &AgentModel) -> Result<bool> {
    let probe = num_complex::Complex64::new(0.734_513, 1.181_07);
    Ok(agent.m() >= agent.p() && matops::rosenbrock_rank_check(&agent.a, &agent.b, &agent.c, probe)?)
}

pub fn design_heterogeneous(
    agents: &[AgentModel],
    tree: &SpanningTreeNetwork,
    knobs: &HeteroKnobs,
) -> Result<HeteroProtocol> {
    let n_agents = tree.n_agents();
    if agents.len() != n_agents {
        return Err(DesignError::DimensionMismatch(format!(
            "{} agent models for {n_agents} agents",
            agents.len()
        )));
    }
    let root = &agents[0];
    let p = root.p();
    for (i, ag) in agents.iter().enumerate() {
        if ag.p() != p {
            return Err(DesignError::DimensionMismatch(format!(
                "agent {} has {} outputs, root has {p}",
                i + 1,
                ag.p()
            )));
        }
        check_closed_left_half_plane(&ag.a)?;
        if !matops::is_stabilizable(&ag.a, &ag.b)? {
            return Err(DesignError::NotStabilizable);
        }
        if !matops::is_detectable(&ag.a, &ag.c)? {
            return Err(DesignError::NotDetectable);
        }
        if i > 0 && !right_invertible(ag)? {
            return Err(DesignError::AssumptionViolation(format!("agent {} is not right-invertible", i + 1)));
        }
    }
    let min_nbar = agents.iter().map(AgentModel::n).max().unwrap_or(0) + root.n();
    let nbar = knobs.nbar.unwrap_or(min_nbar);
    if nbar < min_nbar {
        return Err(DesignError::InvalidInput(format!(
            "nbar = {nbar} is below max n_i + n_1 = {min_nbar}"
        )));
    }

    let mut parts = Vec::with_capacity(n_agents);
    parts.push(None);
    for (i, ag) in agents.iter().enumerate().skip(1) {
        let transform = hetero_transform(ag, root)?;
        let chain = build_chain_form(&transform.a_bar, &transform.b_bar, &transform.c_bar, nbar)?;
        let feedback = design_hetero_feedback(ag, &transform.a12, &transform.a22, &transform.c2)?;
        parts.push(Some((i, transform, chain, feedback)));
    }
    let observer_inputs: Vec<(usize, f64, &ChainForm)> = parts
        .iter()
        .flatten()
        .map(|(i, _, chain, _)| (*i, tree.degree(*i), chain))
        .collect();
    let observer = design_hetero_observer(&observer_inputs, tree.beta(), knobs.k_shape.as_ref(), knobs.epsilon_init)?;

    let injection_base = &observer.h_eps * &observer.q_eps;
    let controllers = parts
        .into_iter()
        .map(|part| {
            part.map(|(agent, transform, chain, feedback)| {
                let injection = &injection_base * chain.c_o.transpose();
                let input_map = &feedback.f * &chain.xi_left_inverse;
                HeteroAgentController {
                    agent,
                    transform,
                    chain,
                    feedback,
                    injection,
                    input_map,
                }
            })
        })
        .collect();
    Ok(HeteroProtocol {
        nbar,
        p,
        observer,
        controllers,
    })
}
