//! Fixed-step integration of the networked closed loop with constant
//! communication delays.
//!
//! Every protocol family reduces to the same per-agent linear loop
//!
//! ```text
//! ṡ_i = P_i s_i + a_ij (R_i m_i(t) − S_i m_j(t − τ_ij))
//! u_i = U_i s_i + a_ij (V_i m_i(t) − V_i m_j(t − τ_ij))
//! m_i = M_i s_i
//! ```
//!
//! where `j` is the parent of `i` and `m` is what an agent transmits. The
//! scheme is classical RK4; delayed messages come from cubic Hermite
//! interpolation of stored states and rates, or from the initial history when
//! the lookup time is negative. Agents are stepped in tree order, so an edge
//! with zero delay sees its parent's current RK stage.

mod trajectory;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::matops::{block, Mat, Vector};
use crate::netgraph::{DelayAssignment, SpanningTreeNetwork};
use crate::protocols::{AgentModel, DynamicProtocol, HeteroProtocol, StaticProtocol};

pub use trajectory::{shift_by_root_delays, AgentSeries, Signal, Trajectory};

const DIVERGENCE_BOUND: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("step {step} exceeds a quarter of the smallest positive delay {min_delay}")]
    StepTooLarge { step: f64, min_delay: f64 },
    #[error("state left the finite range at t = {t} (agent {agent})", agent = .agent + 1)]
    NonFinite { t: f64, agent: usize },
    #[error("lookup at t = {t} precedes the stored history starting at {start}")]
    HistoryUnderrun { t: f64, start: f64 },
    #[error("trajectory ends at {available} but {needed} is required")]
    HorizonTooShort { needed: f64, available: f64 },
    #[error("invalid simulation setup: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Full simulated state of an agent at `t ≤ 0`.
pub type HistoryFn = Arc<dyn Fn(usize, f64) -> Vector + Send + Sync>;

/// Initial history on `[−max τ̄, 0]`.
#[derive(Clone, Default)]
pub enum HistoryPolicy {
    /// Every agent sits at its initial state.
    #[default]
    Constant,
    /// `f(agent, t)` gives the full simulated state of `agent` for `t ≤ 0`;
    /// `f(agent, 0)` must equal the initial state.
    Function(HistoryFn),
}

impl fmt::Debug for HistoryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HistoryPolicy::Constant => f.write_str("Constant"),
            HistoryPolicy::Function(_) => f.write_str("Function(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub step_h: f64,
    pub horizon_t: f64,
    pub history: HistoryPolicy,
    pub sample_stride: usize,
}

impl SimConfig {
    pub fn new(step_h: f64, horizon_t: f64) -> Self {
        Self {
            step_h,
            horizon_t,
            history: HistoryPolicy::Constant,
            sample_stride: 1,
        }
    }

    pub fn validate(&self, delays: &DelayAssignment) -> Result<usize> {
        if !(self.step_h.is_finite() && self.step_h > 0.0) {
            return Err(SimError::InvalidConfig(format!("step must be positive, got {}", self.step_h)));
        }
        if !(self.horizon_t.is_finite() && self.horizon_t > 0.0) {
            return Err(SimError::InvalidConfig(format!("horizon must be positive, got {}", self.horizon_t)));
        }
        if self.sample_stride == 0 {
            return Err(SimError::InvalidConfig("sample stride must be at least 1".into()));
        }
        if let Some(min_delay) = delays.min_positive_delay() {
            if self.step_h > min_delay / 4.0 * (1.0 + 1e-12) {
                return Err(SimError::StepTooLarge {
                    step: self.step_h,
                    min_delay,
                });
            }
        }
        let steps = (self.horizon_t / self.step_h).round();
        if steps < 1.0 {
            return Err(SimError::InvalidConfig("horizon is shorter than one step".into()));
        }
        Ok(steps as usize)
    }
}

/// One agent's loop matrices, see the module docs.
#[derive(Debug, Clone)]
struct LoopAgent {
    plant_dim: usize,
    p: Mat,
    r: Mat,
    s: Mat,
    m: Mat,
    u: Mat,
    v: Mat,
    c_out: Mat,
    init: Vector,
}

impl LoopAgent {
    fn rate(&self, state: &Vector, link: Option<(f64, &Vector)>) -> Vector {
        let mut ds = &self.p * state;
        if let Some((a, remote)) = link {
            ds += (&self.r * (&self.m * state) - &self.s * remote) * a;
        }
        ds
    }

    fn input(&self, state: &Vector, link: Option<(f64, &Vector)>) -> Vector {
        let mut u = &self.u * state;
        if let Some((a, remote)) = link {
            u += &self.v * (&self.m * state - remote) * a;
        }
        u
    }

    fn output(&self, state: &Vector) -> Vector {
        &self.c_out * state.rows(0, self.plant_dim)
    }
}

struct Buffers {
    states: Vec<Vector>,
    rates: Vec<Vector>,
    inputs: Vec<Vector>,
}

struct Engine<'a> {
    tree: &'a SpanningTreeNetwork,
    delays: &'a DelayAssignment,
    agents: Vec<LoopAgent>,
    h: f64,
    history: &'a HistoryPolicy,
}

impl Engine<'_> {
    fn history_state(&self, agent: usize, t: f64) -> Vector {
        match self.history {
            HistoryPolicy::Constant => self.agents[agent].init.clone(),
            HistoryPolicy::Function(f) => f(agent, t),
        }
    }

    // Message sent by `agent` at time `t`, from history or stored steps.
    fn message_at(&self, agent: usize, t: f64, buf: &Buffers) -> Vector {
        let la = &self.agents[agent];
        if t <= 0.0 {
            return &la.m * self.history_state(agent, t);
        }
        let pos = t / self.h;
        let k = pos.floor() as usize;
        let theta = pos - k as f64;
        // The parent may already hold its next state but not yet its rate.
        let last = buf.rates.len() - 1;
        if k >= last {
            // Positive delays are at least four steps, so only rounding lands here.
            return &la.m * &buf.states[last];
        }
        let s = trajectory::hermite(
            &buf.states[k],
            &buf.rates[k],
            &buf.states[k + 1],
            &buf.rates[k + 1],
            self.h,
            theta,
        );
        &la.m * s
    }

    fn run(&self, steps: usize) -> Result<Vec<Buffers>> {
        let n = self.agents.len();
        let h = self.h;
        let mut bufs: Vec<Buffers> = self
            .agents
            .iter()
            .map(|a| Buffers {
                states: {
                    let mut v = Vec::with_capacity(steps + 1);
                    v.push(a.init.clone());
                    v
                },
                rates: Vec::with_capacity(steps + 1),
                inputs: Vec::with_capacity(steps + 1),
            })
            .collect();
        let order = self.tree.ordering();
        let mut stages: Vec<[Vector; 4]> = (0..n).map(|_| std::array::from_fn(|_| Vector::zeros(0))).collect();

        for step in 0..=steps {
            let t = step as f64 * h;
            let final_point = step == steps;
            for &i in order {
                let la = &self.agents[i];
                let link = self.tree.parent_edge(i).map(|(j, a)| {
                    let tau = self.delays.edge_delay(i, j).unwrap_or(0.0);
                    (j, a, tau)
                });
                let remote = |q: usize, tq: f64, bufs: &Vec<Buffers>, stages: &Vec<[Vector; 4]>| {
                    link.map(|(j, a, tau)| {
                        let m = if tau == 0.0 {
                            &self.agents[j].m * &stages[j][q]
                        } else {
                            self.message_at(j, tq - tau, &bufs[j])
                        };
                        (a, m)
                    })
                };
                let x0 = bufs[i].states[step].clone();
                let r0 = remote(0, t, &bufs, &stages);
                let k1 = la.rate(&x0, r0.as_ref().map(|(a, m)| (*a, m)));
                let u0 = la.input(&x0, r0.as_ref().map(|(a, m)| (*a, m)));
                bufs[i].rates.push(k1.clone());
                bufs[i].inputs.push(u0);
                if final_point {
                    stages[i][0] = x0;
                    continue;
                }
                let x1 = &x0 + &k1 * (h / 2.0);
                stages[i][0] = x0.clone();
                stages[i][1] = x1.clone();
                let r1 = remote(1, t + h / 2.0, &bufs, &stages);
                let k2 = la.rate(&x1, r1.as_ref().map(|(a, m)| (*a, m)));
                let x2 = &x0 + &k2 * (h / 2.0);
                stages[i][2] = x2.clone();
                let r2 = remote(2, t + h / 2.0, &bufs, &stages);
                let k3 = la.rate(&x2, r2.as_ref().map(|(a, m)| (*a, m)));
                let x3 = &x0 + &k3 * h;
                stages[i][3] = x3.clone();
                let r3 = remote(3, t + h, &bufs, &stages);
                let k4 = la.rate(&x3, r3.as_ref().map(|(a, m)| (*a, m)));
                let next = &x0 + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
                let norm = next.norm();
                if !norm.is_finite() || norm > DIVERGENCE_BOUND {
                    return Err(SimError::NonFinite { t: t + h, agent: i });
                }
                bufs[i].states.push(next);
            }
        }
        Ok(bufs)
    }

    fn to_trajectory(&self, bufs: Vec<Buffers>, stride: usize) -> Trajectory {
        let h = self.h;
        let history_len = (self.delays.max_root_delay() / h - 1e-9).ceil().max(0.0) as usize;
        let steps = bufs[0].states.len() - 1;
        let mut times: Vec<f64> = (0..history_len).map(|k| -((history_len - k) as f64) * h).collect();
        times.extend((0..=steps).map(|k| k as f64 * h));

        let agents = bufs
            .into_iter()
            .enumerate()
            .map(|(i, b)| {
                let la = &self.agents[i];
                let mut states = Vec::with_capacity(times.len());
                let mut rates = Vec::with_capacity(times.len());
                for &t in &times[..history_len] {
                    states.push(self.history_state(i, t));
                    rates.push(self.history_rate(i, t));
                }
                states.extend(b.states);
                rates.extend(b.rates);
                let mut inputs = vec![Vector::zeros(la.u.nrows()); history_len];
                inputs.extend(b.inputs);
                let outputs = states.iter().map(|s| la.output(s)).collect();
                let output_rates = rates.iter().map(|r| la.output(r)).collect();
                AgentSeries {
                    plant_dim: la.plant_dim,
                    states,
                    rates,
                    inputs,
                    outputs,
                    output_rates,
                }
            })
            .collect();
        Trajectory {
            times,
            dt: h,
            history_len,
            agents,
        }
        .decimate(stride)
    }

    fn history_rate(&self, agent: usize, t: f64) -> Vector {
        match self.history {
            HistoryPolicy::Constant => Vector::zeros(self.agents[agent].init.len()),
            HistoryPolicy::Function(f) => {
                let d = 1e-6 * (1.0 + t.abs());
                (f(agent, t + d.min(-t)) - f(agent, t - d)) / (d.min(-t) + d)
            }
        }
    }
}

fn simulate(
    tree: &SpanningTreeNetwork,
    delays: &DelayAssignment,
    agents: Vec<LoopAgent>,
    config: &SimConfig,
) -> Result<Trajectory> {
    if delays.root_delays().len() != tree.n_agents() {
        return Err(SimError::InvalidConfig(format!(
            "delay assignment covers {} agents, tree has {}",
            delays.root_delays().len(),
            tree.n_agents()
        )));
    }
    let steps = config.validate(delays)?;
    if let HistoryPolicy::Function(f) = &config.history {
        for (i, a) in agents.iter().enumerate() {
            let h0 = f(i, 0.0);
            if h0.len() != a.init.len() {
                return Err(SimError::InvalidConfig(format!(
                    "history of agent {} has dimension {}, expected {}",
                    i + 1,
                    h0.len(),
                    a.init.len()
                )));
            }
        }
    }
    let engine = Engine {
        tree,
        delays,
        agents,
        h: config.step_h,
        history: &config.history,
    };
    let bufs = engine.run(steps)?;
    Ok(engine.to_trajectory(bufs, config.sample_stride))
}

fn check_inits(inits: &[Vector], dims: &[usize], what: &str) -> Result<()> {
    if inits.len() != dims.len() {
        return Err(SimError::InvalidConfig(format!(
            "{} {what} given for {} agents",
            inits.len(),
            dims.len()
        )));
    }
    for (i, (v, &d)) in inits.iter().zip(dims).enumerate() {
        if v.len() != d {
            return Err(SimError::InvalidConfig(format!(
                "{what} of agent {} has length {}, expected {d}",
                i + 1,
                v.len()
            )));
        }
    }
    Ok(())
}

/// `ẋ_i = A x_i + B F ζ_i` with `ζ_i = a_ij (x_i(t) − x_j(t − τ_ij))`.
pub fn simulate_homogeneous_static(
    tree: &SpanningTreeNetwork,
    delays: &DelayAssignment,
    agent: &AgentModel,
    protocol: &StaticProtocol,
    init_states: &[Vector],
    config: &SimConfig,
) -> Result<Trajectory> {
    let n = agent.n();
    if protocol.f.shape() != (agent.m(), n) {
        return Err(SimError::InvalidConfig("protocol gain does not match the agent".into()));
    }
    check_inits(init_states, &vec![n; tree.n_agents()], "initial states")?;
    let bf = &agent.b * &protocol.f;
    let agents = init_states
        .iter()
        .map(|x0| LoopAgent {
            plant_dim: n,
            p: agent.a.clone(),
            r: bf.clone(),
            s: bf.clone(),
            m: Mat::identity(n, n),
            u: Mat::zeros(agent.m(), n),
            v: protocol.f.clone(),
            c_out: agent.c.clone(),
            init: x0.clone(),
        })
        .collect();
    simulate(tree, delays, agents, config)
}

/// Plant plus observer-based controller; `ζ_i` is built from outputs `y = Cx`.
pub fn simulate_homogeneous_dynamic(
    tree: &SpanningTreeNetwork,
    delays: &DelayAssignment,
    agent: &AgentModel,
    protocol: &DynamicProtocol,
    init_states: &[Vector],
    init_controller_states: &[Vector],
    config: &SimConfig,
) -> Result<Trajectory> {
    let (n, nc, p) = (agent.n(), protocol.a_c.nrows(), agent.p());
    if protocol.b_c.shape() != (nc, p) || protocol.c_c.shape() != (agent.m(), nc) {
        return Err(SimError::InvalidConfig("controller does not match the agent".into()));
    }
    check_inits(init_states, &vec![n; tree.n_agents()], "initial states")?;
    check_inits(init_controller_states, &vec![nc; tree.n_agents()], "initial controller states")?;
    let p_mat = block(&[
        &[&agent.a, &(&agent.b * &protocol.c_c)],
        &[&Mat::zeros(nc, n), &protocol.a_c],
    ]);
    let r = block(&[&[&(&agent.b * &protocol.d_c)], &[&protocol.b_c]]);
    let m = block(&[&[&agent.c, &Mat::zeros(p, nc)]]);
    let u = block(&[&[&Mat::zeros(agent.m(), n), &protocol.c_c]]);
    let agents = init_states
        .iter()
        .zip(init_controller_states)
        .map(|(x0, c0)| LoopAgent {
            plant_dim: n,
            p: p_mat.clone(),
            r: r.clone(),
            s: r.clone(),
            m: m.clone(),
            u: u.clone(),
            v: protocol.d_c.clone(),
            c_out: agent.c.clone(),
            init: Vector::from_iterator(n + nc, x0.iter().chain(c0.iter()).copied()),
        })
        .collect();
    simulate(tree, delays, agents, config)
}

/// `ζ_i(t) = a_ij (y_i(t) − y_j(t − τ_ij))` read back from a trajectory; zero
/// for the root.
pub fn coupling_signal(
    traj: &Trajectory,
    tree: &SpanningTreeNetwork,
    delays: &DelayAssignment,
    t: f64,
    i: usize,
) -> Result<Vector> {
    let y_i = traj.output_at(i, t)?;
    match tree.parent_edge(i) {
        None => Ok(Vector::zeros(y_i.len())),
        Some((j, a)) => {
            let tau = delays.edge_delay(i, j).unwrap_or(0.0);
            Ok((y_i - traj.output_at(j, t - tau)?) * a)
        }
    }
}

/// How neighbours' observer outputs reach agent `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeteroMode {
    /// `C_oφ̂_j` travels over the same delayed link as `y_j`.
    #[default]
    DelayedExchange,
    /// Every link is instantaneous, i.e. the protocol integrated in the
    /// time-shifted coordinates where it is stated.
    Transformed,
}

/// Heterogeneous agents with chain-form observers. The root runs `u_1 = 0`
/// and has no observer; every follower starts its observer at zero.
pub fn simulate_heterogeneous(
    tree: &SpanningTreeNetwork,
    delays: &DelayAssignment,
    models: &[AgentModel],
    protocol: &HeteroProtocol,
    init_states: &[Vector],
    mode: HeteroMode,
    config: &SimConfig,
) -> Result<Trajectory> {
    let n_agents = tree.n_agents();
    if models.len() != n_agents || protocol.controllers.len() != n_agents {
        return Err(SimError::InvalidConfig("agent models and controllers must cover every agent".into()));
    }
    let dims: Vec<usize> = models.iter().map(AgentModel::n).collect();
    check_inits(init_states, &dims, "initial states")?;
    let p = protocol.p;
    let obs_dim = p * protocol.nbar;

    let mut agents = Vec::with_capacity(n_agents);
    for (i, model) in models.iter().enumerate() {
        let n = model.n();
        let x0 = &init_states[i];
        let la = match &protocol.controllers[i] {
            None => LoopAgent {
                plant_dim: n,
                p: model.a.clone(),
                r: Mat::zeros(n, 2 * p),
                s: Mat::zeros(n, 2 * p),
                m: block(&[&[&model.c], &[&Mat::zeros(p, n)]]),
                u: Mat::zeros(model.m(), n),
                v: Mat::zeros(model.m(), 2 * p),
                c_out: model.c.clone(),
                init: x0.clone(),
            },
            Some(ctrl) => {
                let cf = &ctrl.chain;
                let psi = &ctrl.input_map;
                let injection = &ctrl.injection;
                let p_mat = block(&[
                    &[&model.a, &(&model.b * psi)],
                    &[&Mat::zeros(obs_dim, n), &(&cf.a_o + &cf.k_o + &cf.b_o * psi)],
                ]);
                let r = block(&[
                    &[&Mat::zeros(n, 2 * p)],
                    &[&block(&[&[injection, &(-injection)]])],
                ]);
                LoopAgent {
                    plant_dim: n,
                    p: p_mat,
                    s: r.clone(),
                    r,
                    m: block(&[&[&model.c, &Mat::zeros(p, obs_dim)], &[&Mat::zeros(p, n), &cf.c_o]]),
                    u: block(&[&[&Mat::zeros(model.m(), n), psi]]),
                    v: Mat::zeros(model.m(), 2 * p),
                    c_out: model.c.clone(),
                    init: Vector::from_iterator(n + obs_dim, x0.iter().copied().chain(std::iter::repeat_n(0.0, obs_dim))),
                }
            }
        };
        agents.push(la);
    }
    match mode {
        HeteroMode::DelayedExchange => simulate(tree, delays, agents, config),
        HeteroMode::Transformed => simulate(tree, &DelayAssignment::zero(tree), agents, config),
    }
}

#[cfg(test)]
mod tests;
