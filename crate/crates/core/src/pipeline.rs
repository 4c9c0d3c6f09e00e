//! Scenario → design → simulation → report, plus artifact files.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::analysis::{
    delayed_output_sync_error, delayed_state_sync_error, subsystem_spectral_certificates,
    synchronized_trajectory_check, Certificate, Design, PairMode, SyncReport,
};
use crate::ddesim::{
    simulate_heterogeneous, simulate_homogeneous_dynamic, simulate_homogeneous_static, HeteroMode, SimError,
    Signal, Trajectory,
};
use crate::matops::{self, Mat, Vector};
use crate::netgraph::DelayAssignment;
use crate::protocols::{
    design_dynamic_partial_state, design_heterogeneous, design_static_full_state, DesignError, DynamicProtocol,
    HeteroKnobs, HeteroProtocol, StaticProtocol,
};
use crate::scenario::{matrix, Mode, Scenario, ScenarioError, Setup};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_VERDICT_FAIL: i32 = 1;
pub const EXIT_DESIGN_ERROR: i32 = 2;
pub const EXIT_INPUT_ERROR: i32 = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Input(#[from] ScenarioError),
    #[error("design failed: {0}")]
    Design(#[from] DesignError),
    #[error("simulation failed: {0}")]
    Simulation(#[from] SimError),
    #[error("cannot write {path}: {source}")]
    Output { path: String, source: std::io::Error },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Design(_) | PipelineError::Simulation(SimError::NonFinite { .. }) => EXIT_DESIGN_ERROR,
            PipelineError::Input(_) | PipelineError::Simulation(_) | PipelineError::Output { .. } => {
                EXIT_INPUT_ERROR
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// A synthesized protocol of any family.
#[derive(Debug, Clone)]
pub enum Designed {
    Static(StaticProtocol),
    Dynamic(DynamicProtocol),
    Hetero(HeteroProtocol),
}

pub fn design(scenario: &Scenario, setup: &Setup) -> Result<Designed> {
    let d = &scenario.design;
    let agent = &setup.agents[0];
    Ok(match scenario.mode {
        Mode::StaticFullState => {
            let q = match &d.q_design {
                Some(rows) => matrix("design.q_design", rows)?,
                None => Mat::identity(agent.n(), agent.n()),
            };
            Designed::Static(design_static_full_state(&agent.a, &agent.b, scenario.bounds.beta, &q, d.rho)?)
        }
        Mode::DynamicPartialState => {
            let alpha = scenario.bounds.alpha.expect("validated by setup");
            Designed::Dynamic(design_dynamic_partial_state(
                &agent.a,
                &agent.b,
                &agent.c,
                scenario.bounds.beta,
                alpha,
                d.delta_init.unwrap_or(1.0),
            )?)
        }
        Mode::Heterogeneous => {
            let k_shape = d.k.as_ref().map(|rows| matrix("design.k", rows)).transpose()?;
            let knobs = HeteroKnobs {
                nbar: d.nbar,
                k_shape,
                epsilon_init: d.epsilon_init.unwrap_or(1.0),
            };
            Designed::Hetero(design_heterogeneous(&setup.agents, &setup.tree, &knobs)?)
        }
    })
}

/// Spectral certificates plus a human-readable account of the design checks.
pub fn certificates(designed: &Designed, setup: &Setup) -> Result<(Vec<Certificate>, String)> {
    let mut certs = Vec::new();
    let mut text = String::new();
    let agent = &setup.agents[0];
    let linalg = |e: matops::LinalgError| PipelineError::Design(e.into());
    match designed {
        Designed::Static(sp) => {
            let _ = writeln!(text, "rho = {:.16e}", sp.rho);
            let subs = subsystem_spectral_certificates(&setup.tree, Design::Static(sp), agent).map_err(linalg)?;
            for (&i, (ell, abscissa)) in setup.tree.ordering().iter().skip(1).zip(subs) {
                certs.push(Certificate {
                    description: format!("A + l B F for agent {} (l = {ell})", i + 1),
                    abscissa,
                });
            }
            for &(ell, abscissa) in &sp.spot_checks {
                certs.push(Certificate {
                    description: format!("A + l B F spot check (l = {ell})"),
                    abscissa,
                });
            }
            for (ell, chk) in &sp.lyapunov {
                let _ = writeln!(
                    text,
                    "lyapunov inequality at l = {ell}: holds = {}, slack = {:.16e}",
                    chk.holds, chk.slack
                );
            }
        }
        Designed::Dynamic(dp) => {
            let _ = writeln!(text, "delta = {:.16e} after {} halvings", dp.delta, dp.certificate.halvings);
            for &(ell, abscissa) in &dp.certificate.grid {
                let _ = writeln!(text, "grid l = {ell:.16e}: error-coordinate abscissa = {abscissa:.16e}");
            }
            let subs = subsystem_spectral_certificates(&setup.tree, Design::Dynamic(dp), agent).map_err(linalg)?;
            for (&i, (ell, abscissa)) in setup.tree.ordering().iter().skip(1).zip(subs) {
                certs.push(Certificate {
                    description: format!("closed-loop subsystem for agent {} (l = {ell})", i + 1),
                    abscissa,
                });
            }
        }
        Designed::Hetero(hp) => {
            let obs = &hp.observer;
            let _ = writeln!(text, "nbar = {}", hp.nbar);
            let _ = writeln!(text, "epsilon = {:.16e} after {} halvings", obs.epsilon, obs.halvings);
            for c in &obs.certificates {
                let _ = writeln!(
                    text,
                    "agent {}: 2 |K_eps^i Q_eps| = {:.16e}, observer abscissa = {:.16e}",
                    c.agent + 1,
                    c.mismatch_norm,
                    c.abscissa
                );
                certs.push(Certificate {
                    description: format!("observer error matrix for agent {}", c.agent + 1),
                    abscissa: c.abscissa,
                });
            }
            for ctrl in hp.controllers.iter().flatten() {
                let model = &setup.agents[ctrl.agent];
                let fb = &ctrl.feedback;
                let _ = writeln!(
                    text,
                    "agent {}: q = {}, k = {}, conjugation residual = {:.3e}, chain residual = {:.3e}, \
                     regulator residuals = ({:.3e}, {:.3e})",
                    ctrl.agent + 1,
                    ctrl.transform.q,
                    ctrl.transform.k,
                    ctrl.transform.conjugation_residual,
                    ctrl.chain.intertwining_residual,
                    fb.regulator_residuals.0,
                    fb.regulator_residuals.1
                );
                let abscissa = matops::spectral_abscissa(&(&model.a + &model.b * &fb.k)).map_err(linalg)?;
                certs.push(Certificate {
                    description: format!("A_i + B_i K_i for agent {}", ctrl.agent + 1),
                    abscissa,
                });
            }
        }
    }
    for c in &certs {
        let _ = writeln!(text, "{}: abscissa = {:.16e}", c.description, c.abscissa);
    }
    Ok((certs, text))
}

fn dump_matrix(out: &mut String, name: &str, m: &Mat) {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| {
            let cells: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            format!("[{}]", cells.join(", "))
        })
        .collect();
    let _ = writeln!(out, "{name} = [{}]", rows.join(", "));
}

/// Text dump of every gain the agents run.
pub fn protocol_dump(designed: &Designed) -> String {
    let mut s = String::new();
    match designed {
        Designed::Static(sp) => {
            let _ = writeln!(s, "family = static-full-state");
            dump_matrix(&mut s, "F", &sp.f);
            dump_matrix(&mut s, "P", &sp.p);
        }
        Designed::Dynamic(dp) => {
            let _ = writeln!(s, "family = dynamic-partial-state");
            let _ = writeln!(s, "delta = {:.16e}", dp.delta);
            dump_matrix(&mut s, "A_c", &dp.a_c);
            dump_matrix(&mut s, "B_c", &dp.b_c);
            dump_matrix(&mut s, "C_c", &dp.c_c);
            dump_matrix(&mut s, "D_c", &dp.d_c);
            dump_matrix(&mut s, "P_delta", &dp.p_delta);
        }
        Designed::Hetero(hp) => {
            let _ = writeln!(s, "family = heterogeneous");
            let _ = writeln!(s, "nbar = {}", hp.nbar);
            let _ = writeln!(s, "epsilon = {:.16e}", hp.observer.epsilon);
            dump_matrix(&mut s, "Q_eps", &hp.observer.q_eps);
            for ctrl in hp.controllers.iter().flatten() {
                let _ = writeln!(s, "[agent {}]", ctrl.agent + 1);
                dump_matrix(&mut s, "F", &ctrl.feedback.f);
                dump_matrix(&mut s, "K_o", &ctrl.chain.k_o);
                dump_matrix(&mut s, "B_o", &ctrl.chain.b_o);
                dump_matrix(&mut s, "Xi", &ctrl.chain.xi);
                dump_matrix(&mut s, "injection", &ctrl.injection);
                dump_matrix(&mut s, "input_map", &ctrl.input_map);
            }
        }
    }
    s
}

/// Result of `verify`: certificates only, no simulation.
#[derive(Debug, Clone)]
pub struct Verification {
    pub certificates: Vec<Certificate>,
    pub text: String,
    pub passed: bool,
}

pub fn verify_design(scenario: &Scenario) -> Result<Verification> {
    let setup = scenario.setup()?;
    let designed = design(scenario, &setup)?;
    let (certificates, text) = certificates(&designed, &setup)?;
    let margin = scenario.tolerances.certificate_margin;
    let passed = certificates.iter().all(|c| c.abscissa < -margin);
    Ok(Verification {
        certificates,
        text,
        passed,
    })
}

pub fn simulate(setup: &Setup, designed: &Designed) -> Result<Trajectory> {
    let agent = &setup.agents[0];
    let traj = match designed {
        Designed::Static(sp) => {
            simulate_homogeneous_static(&setup.tree, &setup.delays, agent, sp, &setup.init_states, &setup.sim)?
        }
        Designed::Dynamic(dp) => {
            let zeros = vec![Vector::zeros(dp.a_c.nrows()); setup.tree.n_agents()];
            let ctrl = setup.init_controller_states.as_deref().unwrap_or(&zeros);
            simulate_homogeneous_dynamic(
                &setup.tree,
                &setup.delays,
                agent,
                dp,
                &setup.init_states,
                ctrl,
                &setup.sim,
            )?
        }
        Designed::Hetero(hp) => simulate_heterogeneous(
            &setup.tree,
            &setup.delays,
            &setup.agents,
            hp,
            &setup.init_states,
            setup.hetero_mode,
            &setup.sim,
        )?,
    };
    Ok(traj)
}

/// Build the synchronization report for a simulated scenario.
pub fn report(
    scenario: &Scenario,
    setup: &Setup,
    designed: &Designed,
    traj: &Trajectory,
    certificates: Vec<Certificate>,
) -> Result<SyncReport> {
    let tol = &scenario.tolerances;
    let agent = &setup.agents[0];
    let (curve, scale, deviation) = match designed {
        Designed::Static(_) | Designed::Dynamic(_) => {
            let generator = match designed {
                Designed::Static(sp) => Design::Static(sp).generator(agent),
                Designed::Dynamic(dp) => Design::Dynamic(dp).generator(agent),
                Designed::Hetero(_) => unreachable!(),
            };
            let curve = delayed_state_sync_error(traj, &setup.tree, &setup.delays, PairMode::TreeEdges)?;
            let check = synchronized_trajectory_check(traj, &generator, &setup.delays)?;
            (curve, 1.0 + check.reference_max_norm, Some(check.deviation.terminal()))
        }
        Designed::Hetero(_) => {
            let delays = match setup.hetero_mode {
                HeteroMode::DelayedExchange => setup.delays.clone(),
                HeteroMode::Transformed => DelayAssignment::zero(&setup.tree),
            };
            let curve = delayed_output_sync_error(traj, &setup.tree, &delays, PairMode::TreeEdges)?;
            let root = &traj.agents[0];
            let y_max = root.outputs[traj.origin()..].iter().map(|y| y.norm()).fold(0.0, f64::max);
            (curve, 1.0 + y_max, None)
        }
    };
    Ok(SyncReport::new(
        scenario.mode.as_str(),
        curve,
        scale,
        deviation,
        certificates,
        tol.terminal,
        tol.certificate_margin,
    ))
}

/// Everything produced by a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: SyncReport,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.report.verdict {
            EXIT_PASS
        } else {
            EXIT_VERDICT_FAIL
        }
    }
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let wrap = |source| PipelineError::Output {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::create(path).map_err(wrap)?;
    let mut w = BufWriter::new(file);
    write(&mut w).map_err(wrap)?;
    std::io::Write::flush(&mut w).map_err(wrap)
}

/// File names written by [`run_scenario`].
pub const ARTIFACTS: [&str; 8] = [
    "protocol.txt",
    "certificates.txt",
    "states.csv",
    "inputs.csv",
    "outputs.csv",
    "error_curve.csv",
    "report.txt",
    "scenario.toml",
];

/// Design, simulate and analyse `scenario`, writing artifacts into `out_dir`.
pub fn run_scenario(scenario: &Scenario, out_dir: &Path) -> Result<RunOutcome> {
    let setup = scenario.setup()?;
    let designed = design(scenario, &setup)?;
    let (certs, cert_text) = certificates(&designed, &setup)?;
    let traj = simulate(&setup, &designed)?;
    let report = report(scenario, &setup, &designed, &traj, certs)?;

    fs::create_dir_all(out_dir).map_err(|source| PipelineError::Output {
        path: out_dir.display().to_string(),
        source,
    })?;
    let text = |s: String| move |w: &mut BufWriter<fs::File>| std::io::Write::write_all(w, s.as_bytes());
    write_file(&out_dir.join("protocol.txt"), text(protocol_dump(&designed)))?;
    write_file(&out_dir.join("certificates.txt"), text(cert_text))?;
    write_file(&out_dir.join("states.csv"), |w| traj.write_csv(w, Signal::States))?;
    write_file(&out_dir.join("inputs.csv"), |w| traj.write_csv(w, Signal::Inputs))?;
    write_file(&out_dir.join("outputs.csv"), |w| traj.write_csv(w, Signal::Outputs))?;
    write_file(&out_dir.join("error_curve.csv"), |w| report.delayed_error.write_csv(w))?;
    write_file(&out_dir.join("report.txt"), text(report.to_key_value()))?;
    write_file(&out_dir.join("scenario.toml"), text(scenario.to_toml()))?;
    Ok(RunOutcome {
        report,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Output directory for a scenario file under `root`: the file stem.
pub fn output_dir_for(root: &Path, scenario_path: &Path) -> PathBuf {
    let stem = scenario_path
        .file_stem()
        .map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned());
    root.join(stem)
}
