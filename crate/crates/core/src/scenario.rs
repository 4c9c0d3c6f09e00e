//! Scenario files.
//!
//! A scenario is a TOML document. Matrices are arrays of rows, agents and
//! edges are numbered from 1 with agent 1 the root. The full grammar, with
//! defaults, is:
//!
//! ```toml
//! mode = "static-full-state"        # or "dynamic-partial-state", "heterogeneous"
//!
//! [graph]
//! weights = [[0, 0], [1, 0]]        # a_ij: agent i receives from agent j
//!
//! [bounds]
//! beta = 1.0
//! alpha = 3.0                       # required for dynamic-partial-state
//!
//! [[agents]]                        # one entry shared by all agents, or one per agent
//! a = [[0, 1], [0, 0]]
//! b = [[0], [1]]
//! c = [[1, 0]]                      # omitted: identity (full state)
//!
//! [[delays]]                        # one per tree edge
//! child = 2
//! parent = 1
//! tau = 0.3
//!
//! [design]                          # every key optional
//! q_design = [[1, 0], [0, 1]]       # default identity
//! rho = 0.5                         # default 1/(2 beta)
//! delta_init = 1.0
//! epsilon_init = 1.0
//! nbar = 4                          # default max n_i + n_1
//! k = [[0, 0, 0, 0]]                # observer shaping, default zero
//!
//! [sim]
//! step = 0.01
//! horizon = 60.0
//! stride = 1
//! hetero_mode = "delayed-exchange"  # or "transformed"
//!
//! [init]
//! states = [[1, 0], [0, 1]]
//! controller_states = [[0, 0], [0, 0]]   # dynamic only, default zero
//!
//! [init.history]                    # omitted: constant at the initial state
//! dt = 0.1                          # samples end at t = 0, spaced dt apart
//! samples = [[[1, 0], [1, 0]], [[0, 1], [0, 1]]]   # per agent, oldest first
//!
//! [tolerances]
//! terminal = 1e-3                   # relative to 1 + max ||x_s|| (or ||y_1||)
//! certificate_margin = 1e-9
//! ```
//!
//! Sampled histories are interpolated linearly and held constant before the
//! first sample. Each sample is the full simulated state of the agent (plant
//! state, then controller state).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ddesim::{HeteroMode, HistoryPolicy, SimConfig};
use crate::matops::{Mat, Vector};
use crate::netgraph::{cumulative_root_delays, DelayAssignment, NetError, SpanningTreeNetwork};
use crate::protocols::{AgentModel, DesignError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error(transparent)]
    Network(#[from] NetError),
    #[error("agent {agent}: {source}")]
    Agent { agent: usize, source: DesignError },
}

fn field(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Field {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    StaticFullState,
    DynamicPartialState,
    Heterogeneous,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::StaticFullState => "static-full-state",
            Mode::DynamicPartialState => "dynamic-partial-state",
            Mode::Heterogeneous => "heterogeneous",
        }
    }
}

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub weights: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub a: Rows,
    pub b: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec {
    pub child: usize,
    pub parent: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_design: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_init: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_init: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nbar: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Rows>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeteroModeSpec {
    #[default]
    DelayedExchange,
    Transformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub step: f64,
    pub horizon: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hetero_mode: Option<HeteroModeSpec>,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistorySpec {
    pub dt: f64,
    pub samples: Vec<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub states: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller_states: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<HistorySpec>,
}

pub const DEFAULT_TERMINAL_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_CERTIFICATE_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_terminal")]
    pub terminal: f64,
    #[serde(default = "default_margin")]
    pub certificate_margin: f64,
}

fn default_terminal() -> f64 {
    DEFAULT_TERMINAL_TOLERANCE
}

fn default_margin() -> f64 {
    DEFAULT_CERTIFICATE_MARGIN
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            terminal: DEFAULT_TERMINAL_TOLERANCE,
            certificate_margin: DEFAULT_CERTIFICATE_MARGIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub mode: Mode,
    pub graph: GraphSpec,
    pub bounds: Bounds,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub delays: Vec<DelaySpec>,
    #[serde(default)]
    pub design: DesignSpec,
    pub sim: SimSpec,
    pub init: InitSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
}

pub fn matrix(name: &str, rows: &Rows) -> Result<Mat, ScenarioError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(field(name, "rows have different lengths"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(field(name, "entries must be finite"));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

/// Inverse of [`matrix`].
pub fn rows_of(m: &Mat) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn vectors(rows: &Rows) -> Vec<Vector> {
    rows.iter().map(|r| Vector::from_row_slice(r)).collect()
}

/// Validated domain objects built from a scenario.
#[derive(Debug, Clone)]
pub struct Setup {
    pub tree: SpanningTreeNetwork,
    pub delays: DelayAssignment,
    /// One model per agent; homogeneous modes repeat the shared model.
    pub agents: Vec<AgentModel>,
    pub init_states: Vec<Vector>,
    pub init_controller_states: Option<Vec<Vector>>,
    pub sim: SimConfig,
    pub hetero_mode: HeteroMode,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario fields are all representable in TOML")
    }

    pub fn n_agents(&self) -> usize {
        self.graph.weights.len()
    }

    fn agent_models(&self) -> Result<Vec<AgentModel>, ScenarioError> {
        let n = self.n_agents();
        let specs: Vec<&AgentSpec> = match (self.mode, self.agents.len()) {
            (Mode::Heterogeneous, k) if k == n => self.agents.iter().collect(),
            (Mode::Heterogeneous, k) => {
                return Err(field("agents", format!("heterogeneous mode needs {n} agents, found {k}")))
            }
            (_, 1) => vec![&self.agents[0]; n],
            (_, k) if k == n => {
                if self.agents.iter().any(|a| a != &self.agents[0]) {
                    return Err(field("agents", "homogeneous modes need identical agents"));
                }
                self.agents.iter().collect()
            }
            (_, k) => return Err(field("agents", format!("expected 1 or {n} agents, found {k}"))),
        };
        specs
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let label = |m: &str| format!("agents[{}].{m}", i + 1);
                let a = matrix(&label("a"), &s.a)?;
                let b = matrix(&label("b"), &s.b)?;
                let model = match &s.c {
                    Some(c) => AgentModel::new(a, b, matrix(&label("c"), c)?),
                    None if self.mode == Mode::StaticFullState => AgentModel::full_state(a, b),
                    None => return Err(field(label("c"), "required for output-coupled modes")),
                };
                model.map_err(|source| ScenarioError::Agent { agent: i + 1, source })
            })
            .collect()
    }

    /// Check cross-field consistency and build the network, delays, models,
    /// initial conditions and simulation settings.
    pub fn setup(&self) -> Result<Setup, ScenarioError> {
        let n = self.n_agents();
        if n == 0 {
            return Err(field("graph.weights", "at least one agent is required"));
        }
        let weights = matrix("graph.weights", &self.graph.weights)?;
        if weights.ncols() != n {
            return Err(field("graph.weights", "must be square"));
        }
        if self.mode == Mode::DynamicPartialState && self.bounds.alpha.is_none() {
            return Err(field("bounds.alpha", "required for dynamic-partial-state"));
        }
        let tree = SpanningTreeNetwork::from_weights(weights, self.bounds.beta, self.bounds.alpha)?;

        let mut edge_delays = BTreeMap::new();
        for (k, d) in self.delays.iter().enumerate() {
            if d.child == 0 || d.parent == 0 || d.child > n || d.parent > n {
                return Err(field(format!("delays[{}]", k + 1), "agent numbers run from 1 to N"));
            }
            if edge_delays.insert((d.child - 1, d.parent - 1), d.tau).is_some() {
                return Err(field(format!("delays[{}]", k + 1), "edge listed twice"));
            }
        }
        let delays = cumulative_root_delays(&tree, &edge_delays)?;

        let agents = self.agent_models()?;
        let init_states = vectors(&self.init.states);
        if init_states.len() != n {
            return Err(field("init.states", format!("expected {n} initial states")));
        }
        for (i, (x0, ag)) in init_states.iter().zip(&agents).enumerate() {
            if x0.len() != ag.n() {
                return Err(field(
                    format!("init.states[{}]", i + 1),
                    format!("expected {} entries, found {}", ag.n(), x0.len()),
                ));
            }
        }
        let init_controller_states = match (&self.init.controller_states, self.mode) {
            (Some(rows), Mode::DynamicPartialState) => {
                let cs = vectors(rows);
                let nc = agents[0].n();
                if cs.len() != n || cs.iter().any(|c| c.len() != nc) {
                    return Err(field(
                        "init.controller_states",
                        format!("expected {n} vectors of length {nc}"),
                    ));
                }
                Some(cs)
            }
            (Some(_), _) => {
                return Err(field("init.controller_states", "only used by dynamic-partial-state"))
            }
            (None, _) => None,
        };

        let mut sim = SimConfig::new(self.sim.step, self.sim.horizon);
        sim.sample_stride = self.sim.stride;
        if let Some(h) = &self.init.history {
            sim.history = self.history_policy(h, &init_states, init_controller_states.as_deref(), &agents)?;
        }
        let hetero_mode = match self.sim.hetero_mode.unwrap_or_default() {
            HeteroModeSpec::DelayedExchange => HeteroMode::DelayedExchange,
            HeteroModeSpec::Transformed => HeteroMode::Transformed,
        };
        Ok(Setup {
            tree,
            delays,
            agents,
            init_states,
            init_controller_states,
            sim,
            hetero_mode,
        })
    }

    fn history_policy(
        &self,
        h: &HistorySpec,
        init_states: &[Vector],
        init_controller: Option<&[Vector]>,
        agents: &[AgentModel],
    ) -> Result<HistoryPolicy, ScenarioError> {
        if self.mode == Mode::Heterogeneous {
            return Err(field("init.history", "heterogeneous scenarios use the constant history"));
        }
        if !(h.dt.is_finite() && h.dt > 0.0) {
            return Err(field("init.history.dt", "must be positive"));
        }
        if h.samples.len() != init_states.len() {
            return Err(field("init.history.samples", "one sample list per agent is required"));
        }
        let mut tables = Vec::with_capacity(h.samples.len());
        for (i, rows) in h.samples.iter().enumerate() {
            let label = format!("init.history.samples[{}]", i + 1);
            let samples = vectors(rows);
            let full_dim = match (self.mode, init_controller) {
                (Mode::DynamicPartialState, _) => 2 * agents[i].n(),
                _ => agents[i].n(),
            };
            let Some(last) = samples.last() else {
                return Err(field(label, "needs at least one sample"));
            };
            if samples.iter().any(|s| s.len() != full_dim) {
                return Err(field(label, format!("samples must have {full_dim} entries")));
            }
            let mut expect = init_states[i].clone();
            if self.mode == Mode::DynamicPartialState {
                let c0 = init_controller.map_or_else(|| Vector::zeros(agents[i].n()), |c| c[i].clone());
                expect = Vector::from_iterator(full_dim, expect.iter().chain(c0.iter()).copied());
            }
            if (last - &expect).norm() > 1e-12 * (1.0 + expect.norm()) {
                return Err(field(label, "the last sample (t = 0) must equal the initial state"));
            }
            tables.push(samples);
        }
        let dt = h.dt;
        Ok(HistoryPolicy::Function(Arc::new(move |agent, t| {
            let samples = &tables[agent];
            let pos = (samples.len() - 1) as f64 + t / dt;
            if pos <= 0.0 {
                return samples[0].clone();
            }
            let k = (pos.floor() as usize).min(samples.len() - 1);
            if k + 1 >= samples.len() {
                return samples[k].clone();
            }
            let theta = pos - k as f64;
            &samples[k] * (1.0 - theta) + &samples[k + 1] * theta
        })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHAIN3: &str = r#"
mode = "static-full-state"

[graph]
weights = [[0, 0, 0], [1, 0, 0], [0, 2, 0]]

[bounds]
beta = 1.0

[[agents]]
a = [[0, 1], [0, 0]]
b = [[0], [1]]

[[delays]]
child = 2
parent = 1
tau = 0.3

[[delays]]
child = 3
parent = 2
tau = 1.1

[sim]
step = 0.01
horizon = 30.0

[init]
states = [[1, 0], [0, 1], [-1, 0.5]]
"#;

    #[test]
    fn parses_and_builds() {
        let s = Scenario::from_toml(CHAIN3).unwrap();
        assert_eq!(s.mode, Mode::StaticFullState);
        assert_eq!(s.tolerances, Tolerances::default());
        let setup = s.setup().unwrap();
        assert_eq!(setup.agents.len(), 3);
        assert_eq!(setup.agents[0].c, Mat::identity(2, 2));
        assert!((setup.delays.root_delays()[2] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut s = Scenario::from_toml(CHAIN3).unwrap();
        s.design.rho = Some(0.1 + 0.2);
        s.init.states[0][0] = 1.0 / 3.0;
        s.init.history = Some(HistorySpec {
            dt: 0.1,
            samples: vec![vec![vec![1.0 / 3.0, 0.0]]; 3],
        });
        let again = Scenario::from_toml(&s.to_toml()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let bad = CHAIN3.replace("beta = 1.0", "beta = \"one\"");
        let msg = Scenario::from_toml(&bad).unwrap_err().to_string();
        assert!(msg.contains("line 8"), "{msg}");
        let bad = CHAIN3.replace("[sim]", "[sim]\nfoo = 1");
        assert!(Scenario::from_toml(&bad).unwrap_err().to_string().contains("foo"));
    }

    #[test]
    fn field_errors() {
        let s = Scenario::from_toml(&CHAIN3.replace("[[1, 0], [0, 1], [-1, 0.5]]", "[[1, 0], [0, 1]]")).unwrap();
        assert!(matches!(s.setup(), Err(ScenarioError::Field { field, .. }) if field == "init.states"));
        let s = Scenario::from_toml(&CHAIN3.replace("beta = 1.0", "beta = 1.5")).unwrap();
        assert!(matches!(s.setup(), Err(ScenarioError::Network(NetError::BoundViolation { .. }))));
        let s = Scenario::from_toml(&CHAIN3.replace("mode = \"static-full-state\"", "mode = \"heterogeneous\""))
            .unwrap();
        assert!(s.setup().is_err());
    }

    #[test]
    fn sampled_history_interpolates() {
        let mut s = Scenario::from_toml(CHAIN3).unwrap();
        s.init.history = Some(HistorySpec {
            dt: 0.5,
            samples: vec![
                vec![vec![0.0, 0.0], vec![1.0, 0.0]],
                vec![vec![0.0, 1.0]],
                vec![vec![-1.0, 0.5]],
            ],
        });
        let setup = s.setup().unwrap();
        let HistoryPolicy::Function(f) = &setup.sim.history else {
            panic!("expected a sampled history")
        };
        assert_eq!(f(0, 0.0)[0], 1.0);
        assert_eq!(f(0, -0.25)[0], 0.5);
        assert_eq!(f(0, -3.0)[0], 0.0);
        assert_eq!(f(1, -1.0)[1], 1.0);
    }
}
