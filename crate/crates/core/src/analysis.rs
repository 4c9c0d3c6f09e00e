//! Synchronization metrics, certificates and reports.

use std::fmt::Write as _;
use std::io::{self, Write};

use crate::ddesim::{shift_by_root_delays, SimError, Trajectory};
use crate::matops::{self, block, Mat, Vector, VERIFY_MARGIN};
use crate::netgraph::{DelayAssignment, SpanningTreeNetwork};
use crate::protocols::{AgentModel, DynamicProtocol, StaticProtocol};

type Result<T> = std::result::Result<T, SimError>;

/// Outcome of checking `(A − ℓρBBᵀP)ᵀP + P(A − ℓρBBᵀP) + Q ≤ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovCheck {
    pub holds: bool,
    /// Minus the largest eigenvalue of the left side plus `Q`.
    pub slack: f64,
}

pub fn lyapunov_inequality_check(a: &Mat, b: &Mat, p: &Mat, q: &Mat, ell: f64, rho: f64) -> LyapunovCheck {
    let closed = a - b * b.transpose() * p * (ell * rho);
    let lhs = closed.transpose() * p + p * &closed + q;
    let top = matops::symmetric_max_eigenvalue(&matops::symmetrize(&lhs));
    // The bound is tight (zero) off the range of PB, so roundoff is judged
    // against the size of the terms.
    let scale = 1.0 + q.norm() + 2.0 * closed.norm() * p.norm();
    LyapunovCheck {
        holds: top <= VERIFY_MARGIN * scale,
        slack: -top,
    }
}

/// A nonnegative scalar time series.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl ErrorCurve {
    pub fn terminal(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Least-squares decay rate `μ'` of `log(error)` over the last third,
    /// `error ≈ c·e^{−μ' t}`. Samples below `1e-10·max` are treated as
    /// numerically zero and skipped; `None` if fewer than three remain.
    pub fn tail_decay_rate(&self) -> Option<f64> {
        let n = self.values.len();
        if n < 3 {
            return None;
        }
        let floor = 1e-10 * self.max().max(f64::MIN_POSITIVE);
        let t_start = self.times[0] + (self.times[n - 1] - self.times[0]) * 2.0 / 3.0;
        let pts: Vec<(f64, f64)> = self
            .times
            .iter()
            .zip(&self.values)
            .filter(|&(&t, &e)| t >= t_start && e > floor)
            .map(|(&t, &e)| (t, e.ln()))
            .collect();
        if pts.len() < 3 {
            return None;
        }
        let m = pts.len() as f64;
        let (st, sy) = pts.iter().fold((0.0, 0.0), |(a, b), &(t, y)| (a + t, b + y));
        let (mt, my) = (st / m, sy / m);
        let (num, den) = pts
            .iter()
            .fold((0.0, 0.0), |(n, d), &(t, y)| (n + (t - mt) * (y - my), d + (t - mt) * (t - mt)));
        if den == 0.0 {
            return None;
        }
        Some(-num / den)
    }

    /// CSV with header `t,error`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "t,error")?;
        for (t, e) in self.times.iter().zip(&self.values) {
            writeln!(out, "{t:.16e},{e:.16e}")?;
        }
        Ok(())
    }
}

/// Which agent pairs enter the delayed synchronization error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairMode {
    /// Tree edges `(i, parent(i))` with their own delay.
    #[default]
    TreeEdges,
    /// Every ordered pair `(i, j)`, `i ≠ j`, with lag `τ_ij = τ̄_i − τ̄_j`.
    /// A negative lag compares `x_i(t)` with the later value `x_j(t + |τ_ij|)`;
    /// samples where that lies past the horizon are dropped.
    AllPairs,
}

#[derive(Clone, Copy)]
enum Quantity {
    PlantState,
    Output,
}

fn value_at(traj: &Trajectory, what: Quantity, agent: usize, t: f64) -> Result<Vector> {
    match what {
        Quantity::PlantState => traj.plant_state_at(agent, t),
        Quantity::Output => traj.output_at(agent, t),
    }
}

fn delayed_error(
    traj: &Trajectory,
    tree: &SpanningTreeNetwork,
    delays: &DelayAssignment,
    mode: PairMode,
    what: Quantity,
) -> Result<ErrorCurve> {
    let pairs: Vec<(usize, usize, f64)> = match mode {
        PairMode::TreeEdges => tree
            .edges()
            .into_iter()
            .map(|(i, j)| (i, j, delays.edge_delay(i, j).unwrap_or(0.0)))
            .collect(),
        PairMode::AllPairs => {
            let n = tree.n_agents();
            (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| (i, j, delays.pair_lag(i, j)))
                .collect()
        }
    };
    let min_lag = pairs.iter().map(|p| p.2).fold(0.0, f64::min);
    let last_t = traj.end() + min_lag;
    let mut curve = ErrorCurve::default();
    for &t in traj.times[traj.origin()..].iter().filter(|&&t| t <= last_t + 1e-9 * traj.dt) {
        let mut worst: f64 = 0.0;
        for &(i, j, lag) in &pairs {
            let xi = value_at(traj, what, i, t)?;
            let xj = value_at(traj, what, j, t - lag)?;
            worst = worst.max((xi - xj).norm());
        }
        curve.times.push(t);
        curve.values.push(worst);
    }
    Ok(curve)
}

/// `max ‖x_i(t) − x_j(t − τ_ij)‖` over the chosen pairs, at every sample `t ≥ 0`.
pub fn delayed_state_sync_error(
    traj: &Trajectory,
    tree: &SpanningTreeNetwork,
    delays: &DelayAssignment,
    mode: PairMode,
) -> Result<ErrorCurve> {
    delayed_error(traj, tree, delays, mode, Quantity::PlantState)
}

/// Output version of [`delayed_state_sync_error`].
pub fn delayed_output_sync_error(
    traj: &Trajectory,
    tree: &SpanningTreeNetwork,
    delays: &DelayAssignment,
    mode: PairMode,
) -> Result<ErrorCurve> {
    delayed_error(traj, tree, delays, mode, Quantity::Output)
}

/// Deviation of the shifted trajectories from the synchronized trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncTrajectoryCheck {
    /// Per sample, `max_i ‖x̃_i(t) − x_s(t)‖`.
    pub deviation: ErrorCurve,
    /// `max_t ‖x_s(t)‖` over the valid window.
    pub reference_max_norm: f64,
}

/// Compare `x̃_i(t)` with `x_s(t) = (I 0)e^{Āt} s_1(0)`, where `generator` is
/// `Ā`, the generator of the root's full simulated state (`A` for static
/// protocols).
pub fn synchronized_trajectory_check(
    traj: &Trajectory,
    generator: &Mat,
    delays: &DelayAssignment,
) -> Result<SyncTrajectoryCheck> {
    let shifted = shift_by_root_delays(traj, delays)?;
    let root = &traj.agents[0];
    let s0 = &root.states[traj.origin()];
    if generator.shape() != (s0.len(), s0.len()) {
        return Err(SimError::InvalidConfig(format!(
            "generator is {}x{}, root state has {} entries",
            generator.nrows(),
            generator.ncols(),
            s0.len()
        )));
    }
    let step = matops::matrix_exponential(generator, shifted.dt)
        .map_err(|e| SimError::InvalidConfig(format!("synchronized trajectory: {e}")))?;
    let dim = root.plant_dim;
    let mut reference = s0.clone();
    let mut deviation = ErrorCurve::default();
    let mut reference_max_norm: f64 = 0.0;
    for (k, &t) in shifted.times.iter().enumerate() {
        if k > 0 {
            reference = &step * reference;
        }
        let xs = reference.rows(0, dim);
        reference_max_norm = reference_max_norm.max(xs.norm());
        let worst = shifted
            .agents
            .iter()
            .map(|a| (a.states[k].rows(0, dim) - xs).norm())
            .fold(0.0, f64::max);
        deviation.times.push(t);
        deviation.values.push(worst);
    }
    Ok(SyncTrajectoryCheck {
        deviation,
        reference_max_norm,
    })
}

/// A designed homogeneous protocol.
#[derive(Debug, Clone, Copy)]
pub enum Design<'a> {
    Static(&'a StaticProtocol),
    Dynamic(&'a DynamicProtocol),
}

impl Design<'_> {
    /// Generator of one agent's full simulated state when `ζ = 0`.
    pub fn generator(&self, agent: &AgentModel) -> Mat {
        match self {
            Design::Static(_) => agent.a.clone(),
            Design::Dynamic(dp) => dp.closed_loop_generator(&agent.a, &agent.b),
        }
    }

    /// `(B̄, M)` such that the delay-free network reads
    /// `ṡ_i = Ā s_i + Σ_j ℓ_ij B̄ M s_j`.
    fn coupling(&self, agent: &AgentModel) -> (Mat, Mat) {
        match self {
            Design::Static(sp) => (&agent.b * &sp.f, Mat::identity(agent.n(), agent.n())),
            Design::Dynamic(dp) => (
                block(&[&[&(&agent.b * &dp.d_c)], &[&dp.b_c]]),
                block(&[&[&agent.c, &Mat::zeros(agent.p(), dp.a_c.nrows())]]),
            ),
        }
    }

    /// `Ā + ℓ B̄ C̄`, the decoupled subsystem for one diagonal entry of `L`.
    pub fn subsystem(&self, agent: &AgentModel, ell: f64) -> Mat {
        let (b_bar, c_bar) = self.coupling(agent);
        self.generator(agent) + b_bar * c_bar * ell
    }
}

/// `(ℓ_ii, spectral abscissa of Ā + ℓ_ii B̄C̄)` for every non-root agent in tree
/// order. All negative certifies the transformed network.
pub fn subsystem_spectral_certificates(
    tree: &SpanningTreeNetwork,
    design: Design<'_>,
    agent: &AgentModel,
) -> std::result::Result<Vec<(f64, f64)>, matops::LinalgError> {
    tree.ordering()
        .iter()
        .skip(1)
        .map(|&i| {
            let ell = tree.degree(i);
            Ok((ell, matops::spectral_abscissa(&design.subsystem(agent, ell))?))
        })
        .collect()
}

/// Largest pointwise `‖ṡ_fd − f(s)‖ / (1 + ‖s‖)` of a shifted trajectory against
/// the delay-free network, with a five-point central difference at interior
/// samples.
pub fn delay_free_residual(
    shifted: &Trajectory,
    tree: &SpanningTreeNetwork,
    design: Design<'_>,
    agent: &AgentModel,
) -> f64 {
    let a_bar = design.generator(agent);
    let (b_bar, c_bar) = design.coupling(agent);
    let h = shifted.dt;
    let len = shifted.times.len();
    let mut worst: f64 = 0.0;
    for k in 2..len.saturating_sub(2) {
        for i in 0..shifted.n_agents() {
            let s = &shifted.agents[i].states;
            let fd = (&s[k - 2] - &s[k - 1] * 8.0 + &s[k + 1] * 8.0 - &s[k + 2]) / (12.0 * h);
            let mut rhs = &a_bar * &s[k];
            if let Some((j, a)) = tree.parent_edge(i) {
                rhs += &b_bar * (&c_bar * (&s[k] - &shifted.agents[j].states[k])) * a;
            }
            worst = worst.max((fd - rhs).norm() / (1.0 + s[k].norm()));
        }
    }
    worst
}

/// Named spectral certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub description: String,
    pub abscissa: f64,
}

/// Summary of one scenario run.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncReport {
    pub mode: String,
    pub delayed_error: ErrorCurve,
    pub terminal_error: f64,
    /// Normalizer `1 + max‖x_s‖` (or `1 + max‖y_1‖` for output sync).
    pub scale: f64,
    pub trajectory_deviation: Option<f64>,
    pub decay_rate: Option<f64>,
    pub certificates: Vec<Certificate>,
    pub tolerance: f64,
    pub certificate_margin: f64,
    pub verdict: bool,
}

impl SyncReport {
    /// Assemble a report; the verdict passes iff the terminal error and the
    /// trajectory deviation are within `tolerance · scale` and every
    /// certificate abscissa is below `−certificate_margin`.
    pub fn new(
        mode: &str,
        delayed_error: ErrorCurve,
        scale: f64,
        trajectory_deviation: Option<f64>,
        certificates: Vec<Certificate>,
        tolerance: f64,
        certificate_margin: f64,
    ) -> Self {
        let terminal_error = delayed_error.terminal();
        let bound = tolerance * scale;
        let verdict = terminal_error <= bound
            && trajectory_deviation.is_none_or(|d| d <= bound)
            && certificates.iter().all(|c| c.abscissa < -certificate_margin);
        let decay_rate = delayed_error.tail_decay_rate();
        Self {
            mode: mode.to_string(),
            delayed_error,
            terminal_error,
            scale,
            trajectory_deviation,
            decay_rate,
            certificates,
            tolerance,
            certificate_margin,
            verdict,
        }
    }

    /// Flat `key=value` text, one entry per line.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| format!("{x:.16e}"));
        let _ = writeln!(s, "mode={}", self.mode);
        let _ = writeln!(s, "verdict={}", if self.verdict { "pass" } else { "fail" });
        let _ = writeln!(s, "terminal_error={:.16e}", self.terminal_error);
        let _ = writeln!(s, "scale={:.16e}", self.scale);
        let _ = writeln!(s, "relative_terminal_error={:.16e}", self.terminal_error / self.scale);
        let _ = writeln!(s, "trajectory_deviation={}", opt(self.trajectory_deviation));
        let _ = writeln!(s, "decay_rate={}", opt(self.decay_rate));
        let _ = writeln!(s, "tolerance={:.16e}", self.tolerance);
        let _ = writeln!(s, "certificate_margin={:.16e}", self.certificate_margin);
        let _ = writeln!(s, "certificates={}", self.certificates.len());
        for (k, c) in self.certificates.iter().enumerate() {
            let _ = writeln!(s, "certificate.{}.description={}", k + 1, c.description);
            let _ = writeln!(s, "certificate.{}.abscissa={:.16e}", k + 1, c.abscissa);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddesim::{simulate_homogeneous_static, AgentSeries, SimConfig};
    use crate::netgraph::cumulative_root_delays;
    use crate::protocols::design_static_full_state;
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Mat {
        Mat::from_row_slice(rows, cols, data)
    }

    fn chain(n: usize) -> SpanningTreeNetwork {
        let mut w = Mat::zeros(n, n);
        for k in 1..n {
            w[(k, k - 1)] = 1.0;
        }
        SpanningTreeNetwork::from_weights(w, 1.0, None).unwrap()
    }

    fn delays(tree: &SpanningTreeNetwork, taus: &[f64]) -> DelayAssignment {
        let map: BTreeMap<_, _> = taus.iter().enumerate().map(|(k, &t)| ((k + 1, k), t)).collect();
        cumulative_root_delays(tree, &map).unwrap()
    }

    // Agent i carries f(t − τ̄_i) exactly, with history.
    fn replica_trajectory(f: impl Fn(f64) -> (f64, f64), taus: &[f64], dt: f64, horizon: f64) -> Trajectory {
        let hist = (taus.iter().copied().fold(0.0, f64::max) / dt).ceil() as usize;
        let count = hist + (horizon / dt).round() as usize + 1;
        let times: Vec<f64> = (0..count).map(|k| (k as f64 - hist as f64) * dt).collect();
        let one = |x: f64| Vector::from_element(1, x);
        let agents = taus
            .iter()
            .map(|&tau| AgentSeries {
                plant_dim: 1,
                states: times.iter().map(|&t| one(f(t - tau).0)).collect(),
                rates: times.iter().map(|&t| one(f(t - tau).1)).collect(),
                inputs: times.iter().map(|_| one(0.0)).collect(),
                outputs: times.iter().map(|&t| one(f(t - tau).0)).collect(),
                output_rates: times.iter().map(|&t| one(f(t - tau).1)).collect(),
            })
            .collect();
        Trajectory {
            times,
            dt,
            history_len: hist,
            agents,
        }
    }

    #[test]
    fn lyapunov_examples() {
        let one = m(1, 1, &[1.0]);
        let zero = m(1, 1, &[0.0]);
        let c = lyapunov_inequality_check(&zero, &one, &one, &one, 1.0, 0.5);
        assert!(c.holds);
        assert_abs_diff_eq!(c.slack, 0.0, epsilon = 1e-15);
        let c = lyapunov_inequality_check(&zero, &one, &one, &one, 2.0, 0.5);
        assert!(c.holds);
        assert_abs_diff_eq!(c.slack, 1.0, epsilon = 1e-14);
        assert!(!lyapunov_inequality_check(&zero, &one, &one, &one, 1.0, 0.0).holds);
    }

    #[test]
    fn replicas_have_zero_delayed_error() {
        let tree = chain(3);
        let d = delays(&tree, &[0.3, 1.1]);
        let taus = d.root_delays().to_vec();
        let constant = replica_trajectory(|_| (4.0, 0.0), &taus, 0.1, 5.0);
        let curve = delayed_state_sync_error(&constant, &tree, &d, PairMode::TreeEdges).unwrap();
        assert!(curve.values.iter().all(|&e| e == 0.0));

        let grow = replica_trajectory(|t| ((0.3 * t).exp(), 0.3 * (0.3 * t).exp()), &taus, 0.1, 5.0);
        for mode in [PairMode::TreeEdges, PairMode::AllPairs] {
            let curve = delayed_state_sync_error(&grow, &tree, &d, mode).unwrap();
            assert!(curve.max() <= 1e-12, "{mode:?}: {}", curve.max());
        }
        // all-pairs drops the samples whose partner lies past the horizon
        let all = delayed_state_sync_error(&grow, &tree, &d, PairMode::AllPairs).unwrap();
        assert!((all.times.last().unwrap() - (5.0 - 1.4)).abs() < 1e-9);
    }

    #[test]
    fn zero_outputs_have_zero_error() {
        let tree = chain(2);
        let d = delays(&tree, &[0.5]);
        let traj = replica_trajectory(|_| (0.0, 0.0), &[0.0, 0.5], 0.1, 2.0);
        let curve = delayed_output_sync_error(&traj, &tree, &d, PairMode::TreeEdges).unwrap();
        assert_eq!(curve.max(), 0.0);
    }

    #[test]
    fn static_certificates() {
        let one = m(1, 1, &[1.0]);
        let agent = AgentModel::full_state(m(1, 1, &[0.0]), one.clone()).unwrap();
        let sp = design_static_full_state(&agent.a, &agent.b, 1.0, &one, None).unwrap();
        let mut w = Mat::zeros(3, 3);
        w[(1, 0)] = 1.0;
        w[(2, 1)] = 2.0;
        let tree = SpanningTreeNetwork::from_weights(w, 1.0, None).unwrap();
        let certs = subsystem_spectral_certificates(&tree, Design::Static(&sp), &agent).unwrap();
        assert_eq!(certs.len(), 2);
        assert_abs_diff_eq!(certs[0].1, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(certs[1].1, -1.0, epsilon = 1e-12);

        let di = AgentModel::full_state(m(2, 2, &[0.0, 1.0, 0.0, 0.0]), m(2, 1, &[0.0, 1.0])).unwrap();
        let sp = design_static_full_state(&di.a, &di.b, 1.0, &Mat::identity(2, 2), None).unwrap();
        let certs = subsystem_spectral_certificates(&tree, Design::Static(&sp), &di).unwrap();
        assert!(certs.iter().all(|&(_, s)| s < 0.0));
    }

    #[test]
    fn static_chain_synchronizes_on_the_root_trajectory() {
        let agent = AgentModel::full_state(m(2, 2, &[0.0, 1.0, -1.0, 0.0]), m(2, 1, &[0.0, 1.0])).unwrap();
        let sp = design_static_full_state(&agent.a, &agent.b, 1.0, &Mat::identity(2, 2), None).unwrap();
        let tree = chain(3);
        let d = delays(&tree, &[0.3, 1.1]);
        let inits = [
            Vector::from_row_slice(&[1.0, 0.0]),
            Vector::from_row_slice(&[0.0, 1.0]),
            Vector::from_row_slice(&[-1.0, -1.0]),
        ];
        let traj = simulate_homogeneous_static(&tree, &d, &agent, &sp, &inits, &SimConfig::new(0.01, 40.0)).unwrap();
        let curve = delayed_state_sync_error(&traj, &tree, &d, PairMode::TreeEdges).unwrap();
        assert!(curve.terminal() < 1e-3);
        let tail = &curve.values[curve.values.len() * 2 / 3..];
        assert!(tail.last().unwrap() < tail.first().unwrap());
        assert!(curve.tail_decay_rate().unwrap() > 0.0);

        let check = synchronized_trajectory_check(&traj, &agent.a, &d).unwrap();
        assert!(check.deviation.terminal() < 1e-3 * (1.0 + check.reference_max_norm));
        assert_abs_diff_eq!(check.reference_max_norm, 1.0, epsilon = 1e-6);

        let shifted = shift_by_root_delays(&traj, &d).unwrap();
        assert!(delay_free_residual(&shifted, &tree, Design::Static(&sp), &agent) < 1e-4);
    }

    #[test]
    fn lone_root_deviation_is_integrator_error() {
        let agent = AgentModel::full_state(m(1, 1, &[-0.5]), m(1, 1, &[1.0])).unwrap();
        let sp = design_static_full_state(&agent.a, &agent.b, 1.0, &m(1, 1, &[1.0]), None).unwrap();
        let tree = SpanningTreeNetwork::from_weights(Mat::zeros(1, 1), 1.0, None).unwrap();
        let d = DelayAssignment::zero(&tree);
        let traj = simulate_homogeneous_static(
            &tree,
            &d,
            &agent,
            &sp,
            &[Vector::from_element(1, 2.0)],
            &SimConfig::new(0.01, 5.0),
        )
        .unwrap();
        let check = synchronized_trajectory_check(&traj, &agent.a, &d).unwrap();
        assert!(check.deviation.max() <= 1e-6);
    }

    #[test]
    fn decay_fit_recovers_rate() {
        let times: Vec<f64> = (0..=300).map(|k| k as f64 * 0.1).collect();
        let values = times.iter().map(|t| 3.0 * (-0.7 * t).exp()).collect();
        let curve = ErrorCurve { times, values };
        assert_abs_diff_eq!(curve.tail_decay_rate().unwrap(), 0.7, epsilon = 1e-9);
        assert_eq!(ErrorCurve::default().tail_decay_rate(), None);
    }

    #[test]
    fn report_serialization() {
        let curve = ErrorCurve {
            times: vec![0.0, 1.0],
            values: vec![1.0, 1e-4],
        };
        let certs = vec![Certificate {
            description: "A + l B F at l = 1".into(),
            abscissa: -0.5,
        }];
        let r = SyncReport::new("static-full-state", curve.clone(), 2.0, Some(1e-4), certs, 1e-3, 1e-9);
        assert!(r.verdict);
        let text = r.to_key_value();
        assert!(text.contains("verdict=pass\n"));
        assert!(text.contains("certificate.1.abscissa=-5.0000000000000000e-1\n"));
        let r = SyncReport::new("static-full-state", curve, 0.01, None, vec![], 1e-3, 1e-9);
        assert!(!r.verdict);
        let mut buf = Vec::new();
        r.delayed_error.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,error\n0.0000000000000000e0,1.0000000000000000e0\n"));
    }
}
