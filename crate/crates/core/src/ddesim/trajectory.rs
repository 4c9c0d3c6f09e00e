use std::io::{self, Write};

use super::{Result, SimError};
use crate::matops::Vector;
use crate::netgraph::DelayAssignment;

/// Samples of one agent on the trajectory grid.
///
/// `states` holds the full simulated state: the plant state `x_i` in the first
/// `plant_dim` entries, followed by the controller state (`χ_i` or `φ̂_i`).
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSeries {
    pub plant_dim: usize,
    pub states: Vec<Vector>,
    pub rates: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub outputs: Vec<Vector>,
    pub output_rates: Vec<Vector>,
}

impl AgentSeries {
    pub fn plant_state(&self, k: usize) -> Vector {
        self.states[k].rows(0, self.plant_dim).into_owned()
    }

    pub fn controller_state(&self, k: usize) -> Vector {
        let s = &self.states[k];
        s.rows(self.plant_dim, s.len() - self.plant_dim).into_owned()
    }
}

/// Uniformly sampled closed-loop trajectory.
///
/// `times[k] = (k − history_len)·dt`; the first `history_len` samples lie in
/// the initial-history interval. Inputs are zero there.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub dt: f64,
    pub history_len: usize,
    pub agents: Vec<AgentSeries>,
}

pub(crate) fn hermite(y0: &Vector, m0: &Vector, y1: &Vector, m1: &Vector, h: f64, theta: f64) -> Vector {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + theta;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    y0 * h00 + m0 * (h10 * h) + y1 * h01 + m1 * (h11 * h)
}

pub(crate) fn hermite_rate(y0: &Vector, m0: &Vector, y1: &Vector, m1: &Vector, h: f64, theta: f64) -> Vector {
    let t2 = theta * theta;
    let d00 = (6.0 * t2 - 6.0 * theta) / h;
    let d10 = 3.0 * t2 - 4.0 * theta + 1.0;
    let d01 = (-6.0 * t2 + 6.0 * theta) / h;
    let d11 = 3.0 * t2 - 2.0 * theta;
    y0 * d00 + m0 * d10 + y1 * d01 + m1 * d11
}

// Fractional positions within this many ulps-ish of a grid point snap to it.
const SNAP: f64 = 1e-9;

impl Trajectory {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("trajectories are nonempty")
    }

    /// Index of the sample at `t = 0`.
    pub fn origin(&self) -> usize {
        self.history_len
    }

    // (k, θ) with t = times[k] + θ·dt, θ ∈ [0, 1).
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let pos = (t - self.start()) / self.dt;
        let last = (self.times.len() - 1) as f64;
        if pos < -SNAP {
            return Err(SimError::HistoryUnderrun { t, start: self.start() });
        }
        if pos > last + SNAP {
            return Err(SimError::HorizonTooShort { needed: t, available: self.end() });
        }
        let nearest = pos.round();
        if (pos - nearest).abs() <= SNAP {
            return Ok((nearest.clamp(0.0, last) as usize, 0.0));
        }
        let k = pos.floor() as usize;
        Ok((k, pos - k as f64))
    }

    fn interpolate(&self, values: &[Vector], rates: &[Vector], t: f64) -> Result<Vector> {
        let (k, theta) = self.locate(t)?;
        if theta == 0.0 {
            return Ok(values[k].clone());
        }
        Ok(hermite(&values[k], &rates[k], &values[k + 1], &rates[k + 1], self.dt, theta))
    }

    fn interpolate_rate(&self, values: &[Vector], rates: &[Vector], t: f64) -> Result<Vector> {
        let (k, theta) = self.locate(t)?;
        if theta == 0.0 {
            return Ok(rates[k].clone());
        }
        Ok(hermite_rate(&values[k], &rates[k], &values[k + 1], &rates[k + 1], self.dt, theta))
    }

    /// Full state of `agent` at time `t` by cubic Hermite interpolation.
    pub fn state_at(&self, agent: usize, t: f64) -> Result<Vector> {
        let a = &self.agents[agent];
        self.interpolate(&a.states, &a.rates, t)
    }

    pub fn plant_state_at(&self, agent: usize, t: f64) -> Result<Vector> {
        let dim = self.agents[agent].plant_dim;
        Ok(self.state_at(agent, t)?.rows(0, dim).into_owned())
    }

    pub fn output_at(&self, agent: usize, t: f64) -> Result<Vector> {
        let a = &self.agents[agent];
        self.interpolate(&a.outputs, &a.output_rates, t)
    }

    /// Keep every `stride`-th sample, aligned so that `t = 0` is kept.
    pub fn decimate(&self, stride: usize) -> Trajectory {
        if stride <= 1 {
            return self.clone();
        }
        let first = self.history_len % stride;
        let keep: Vec<usize> = (first..self.times.len()).step_by(stride).collect();
        let pick = |v: &[Vector]| keep.iter().map(|&k| v[k].clone()).collect::<Vec<_>>();
        Trajectory {
            times: keep.iter().map(|&k| self.times[k]).collect(),
            dt: self.dt * stride as f64,
            history_len: self.history_len / stride,
            agents: self
                .agents
                .iter()
                .map(|a| AgentSeries {
                    plant_dim: a.plant_dim,
                    states: pick(&a.states),
                    rates: pick(&a.rates),
                    inputs: pick(&a.inputs),
                    outputs: pick(&a.outputs),
                    output_rates: pick(&a.output_rates),
                })
                .collect(),
        }
    }

    /// CSV with header `t,agent,state_index,value`. Rows are ordered by time,
    /// then agent, then index; agents and indices are one-based.
    pub fn write_csv<W: Write>(&self, out: &mut W, signal: Signal) -> io::Result<()> {
        writeln!(out, "t,agent,state_index,value")?;
        for (k, t) in self.times.iter().enumerate() {
            for (i, a) in self.agents.iter().enumerate() {
                let v = match signal {
                    Signal::States => &a.states[k],
                    Signal::Inputs => &a.inputs[k],
                    Signal::Outputs => &a.outputs[k],
                };
                for (j, x) in v.iter().enumerate() {
                    writeln!(out, "{t:.16e},{},{},{x:.16e}", i + 1, j + 1)?;
                }
            }
        }
        Ok(())
    }
}

/// Which sampled signal to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    States,
    Inputs,
    Outputs,
}

/// Advance agent `i` by its cumulative root delay: `x̃_i(t) = x_i(t + τ̄_i)`.
///
/// The result starts at `t = 0` and ends at `T − max τ̄`, on the same spacing.
pub fn shift_by_root_delays(traj: &Trajectory, delays: &DelayAssignment) -> Result<Trajectory> {
    let taus = delays.root_delays();
    if taus.len() != traj.n_agents() {
        return Err(SimError::InvalidConfig(format!(
            "{} root delays for {} agents",
            taus.len(),
            traj.n_agents()
        )));
    }
    let window = traj.end() - delays.max_root_delay();
    if window <= 0.0 {
        return Err(SimError::HorizonTooShort {
            needed: delays.max_root_delay(),
            available: traj.end(),
        });
    }
    let count = (window / traj.dt + SNAP).floor() as usize + 1;
    let times: Vec<f64> = (0..count).map(|k| k as f64 * traj.dt).collect();

    let mut agents = Vec::with_capacity(traj.n_agents());
    for (i, a) in traj.agents.iter().enumerate() {
        let mut series = AgentSeries {
            plant_dim: a.plant_dim,
            states: Vec::with_capacity(count),
            rates: Vec::with_capacity(count),
            inputs: Vec::with_capacity(count),
            outputs: Vec::with_capacity(count),
            output_rates: Vec::with_capacity(count),
        };
        for &t in &times {
            let s = t + taus[i];
            let (k, theta) = traj.locate(s)?;
            if theta == 0.0 {
                series.states.push(a.states[k].clone());
                series.rates.push(a.rates[k].clone());
                series.inputs.push(a.inputs[k].clone());
                series.outputs.push(a.outputs[k].clone());
                series.output_rates.push(a.output_rates[k].clone());
            } else {
                series.states.push(traj.interpolate(&a.states, &a.rates, s)?);
                series.rates.push(traj.interpolate_rate(&a.states, &a.rates, s)?);
                let w = &a.inputs[k] * (1.0 - theta) + &a.inputs[k + 1] * theta;
                series.inputs.push(w);
                series.outputs.push(traj.interpolate(&a.outputs, &a.output_rates, s)?);
                series.output_rates.push(traj.interpolate_rate(&a.outputs, &a.output_rates, s)?);
            }
        }
        agents.push(series);
    }
    Ok(Trajectory {
        times,
        dt: traj.dt,
        history_len: 0,
        agents,
    })
}
