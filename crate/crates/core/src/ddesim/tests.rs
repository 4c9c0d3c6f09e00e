use std::collections::BTreeMap;

use super::*;
use crate::matops::matrix_exponential;
use crate::netgraph::cumulative_root_delays;
use crate::protocols::{design_dynamic_partial_state, design_heterogeneous, design_static_full_state, HeteroKnobs};

fn m(rows: usize, cols: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(rows, cols, data)
}

fn v(data: &[f64]) -> Vector {
    Vector::from_row_slice(data)
}

fn double_integrator() -> AgentModel {
    AgentModel::full_state(m(2, 2, &[0.0, 1.0, 0.0, 0.0]), m(2, 1, &[0.0, 1.0])).unwrap()
}

fn chain(weights: &[f64]) -> SpanningTreeNetwork {
    let n = weights.len() + 1;
    let mut w = Mat::zeros(n, n);
    for (k, &a) in weights.iter().enumerate() {
        w[(k + 1, k)] = a;
    }
    SpanningTreeNetwork::from_weights(w, 0.5, None).unwrap()
}

fn chain_delays(tree: &SpanningTreeNetwork, taus: &[f64]) -> DelayAssignment {
    let map: BTreeMap<_, _> = taus.iter().enumerate().map(|(k, &t)| ((k + 1, k), t)).collect();
    cumulative_root_delays(tree, &map).unwrap()
}

fn static_design(agent: &AgentModel) -> StaticProtocol {
    let n = agent.n();
    design_static_full_state(&agent.a, &agent.b, 0.5, &Mat::identity(n, n), None).unwrap()
}

// Dense reference: x(t) = e^{Gt} x(0) sampled on the trajectory grid.
fn dense_reference(g: &Mat, x0: &Vector, traj: &Trajectory) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, &t) in traj.times.iter().enumerate().skip(traj.history_len) {
        let x = matrix_exponential(g, t).unwrap() * x0;
        let sim: Vec<f64> = traj.agents.iter().flat_map(|a| a.states[k].iter().copied()).collect();
        let err = (Vector::from_vec(sim) - &x).norm() / (1.0 + x.norm());
        worst = worst.max(err);
    }
    worst
}

#[test]
fn lone_root_follows_matrix_exponential() {
    let tree = SpanningTreeNetwork::from_weights(Mat::zeros(1, 1), 1.0, None).unwrap();
    let agent = double_integrator();
    let proto = static_design(&agent);
    let cfg = SimConfig::new(0.01, 5.0);
    let x0 = v(&[1.0, -0.5]);
    let traj = simulate_homogeneous_static(&tree, &DelayAssignment::zero(&tree), &agent, &proto, std::slice::from_ref(&x0), &cfg)
        .unwrap();
    let err = dense_reference(&agent.a, &x0, &traj);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn zero_delay_static_matches_dense_solution() {
    let tree = chain(&[1.5]);
    let agent = double_integrator();
    let proto = static_design(&agent);
    let bf = &agent.b * &proto.f;
    let g = block(&[&[&agent.a, &Mat::zeros(2, 2)], &[&(-&bf * 1.5), &(&agent.a + &bf * 1.5)]]);
    let inits = [v(&[1.0, 0.0]), v(&[-1.0, 2.0])];
    let traj = simulate_homogeneous_static(
        &tree,
        &DelayAssignment::zero(&tree),
        &agent,
        &proto,
        &inits,
        &SimConfig::new(0.01, 8.0),
    )
    .unwrap();
    let x0 = v(&[1.0, 0.0, -1.0, 2.0]);
    assert!(dense_reference(&g, &x0, &traj) < 1e-6);
}

#[test]
fn zero_delay_dynamic_matches_dense_solution() {
    let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let b = m(2, 1, &[0.0, 1.0]);
    let c = m(1, 2, &[1.0, 0.0]);
    let agent = AgentModel::new(a.clone(), b.clone(), c.clone()).unwrap();
    let tree = chain(&[1.0]);
    let dp = design_dynamic_partial_state(&a, &b, &c, 0.5, 2.0, 1.0).unwrap();
    // Per agent (x, χ): ẋ = Ax + BC_cχ, χ̇ = A_cχ + B_c a (C x_i − C x_j)
    let a_bar = dp.closed_loop_generator(&a, &b);
    let b_bar = block(&[&[&(&b * &dp.d_c)], &[&dp.b_c]]);
    let c_bar = block(&[&[&c, &Mat::zeros(1, 2)]]);
    let coupling = &b_bar * &c_bar;
    let g = block(&[&[&a_bar, &Mat::zeros(4, 4)], &[&(-&coupling), &(&a_bar + &coupling)]]);
    let inits = [v(&[1.0, 0.5]), v(&[-1.0, 0.0])];
    let ctrl = [v(&[0.2, 0.0]), v(&[0.0, -0.3])];
    let traj = simulate_homogeneous_dynamic(
        &tree,
        &DelayAssignment::zero(&tree),
        &agent,
        &dp,
        &inits,
        &ctrl,
        &SimConfig::new(0.01, 10.0),
    )
    .unwrap();
    let x0 = v(&[1.0, 0.5, 0.2, 0.0, -1.0, 0.0, 0.0, -0.3]);
    assert!(dense_reference(&g, &x0, &traj) < 1e-6);
}

#[test]
fn root_controller_decays_alone() {
    let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let b = m(2, 1, &[0.0, 1.0]);
    let c = m(1, 2, &[1.0, 0.0]);
    let agent = AgentModel::new(a.clone(), b.clone(), c.clone()).unwrap();
    let tree = SpanningTreeNetwork::from_weights(Mat::zeros(1, 1), 1.0, None).unwrap();
    let dp = design_dynamic_partial_state(&a, &b, &c, 1.0, 2.0, 1.0).unwrap();
    let traj = simulate_homogeneous_dynamic(
        &tree,
        &DelayAssignment::zero(&tree),
        &agent,
        &dp,
        &[v(&[0.0, 0.0])],
        &[v(&[1.0, 1.0])],
        &SimConfig::new(0.01, 30.0),
    )
    .unwrap();
    let last = traj.times.len() - 1;
    assert!(traj.agents[0].controller_state(last).norm() < 1e-3);
    assert!(traj.agents[0].inputs[last].norm() < 1e-3);
}

#[test]
fn zero_delay_heterogeneous_matches_dense_solution() {
    let one = m(1, 1, &[1.0]);
    let models = vec![
        AgentModel::new(m(1, 1, &[0.0]), one.clone(), one.clone()).unwrap(),
        AgentModel::new(m(1, 1, &[-1.0]), one.clone(), one.clone()).unwrap(),
    ];
    let tree = chain(&[1.0]);
    let hp = design_heterogeneous(
        &models,
        &tree,
        &HeteroKnobs {
            epsilon_init: 1.0,
            ..Default::default()
        },
    )
    .unwrap();
    let ctrl = hp.controllers[1].as_ref().unwrap();
    let dim = hp.p * hp.nbar;
    let psi = &ctrl.input_map;
    let hq = &ctrl.injection;
    let cf = &ctrl.chain;
    // state (x1, x2, φ̂2)
    let mut g = Mat::zeros(2 + dim, 2 + dim);
    g.view_mut((1, 1), (1, 1)).copy_from(&models[1].a);
    g.view_mut((1, 2), (1, dim)).copy_from(psi);
    let obs = &cf.a_o + &cf.k_o + &cf.b_o * psi - hq * &cf.c_o;
    g.view_mut((2, 2), (dim, dim)).copy_from(&obs);
    g.view_mut((2, 1), (dim, 1)).copy_from(hq);
    g.view_mut((2, 0), (dim, 1)).copy_from(&(-hq));
    let traj = simulate_heterogeneous(
        &tree,
        &DelayAssignment::zero(&tree),
        &models,
        &hp,
        &[v(&[1.0]), v(&[-2.0])],
        HeteroMode::DelayedExchange,
        &SimConfig::new(0.01, 10.0),
    )
    .unwrap();
    let mut x0 = Vector::zeros(2 + dim);
    x0[0] = 1.0;
    x0[1] = -2.0;
    assert!(dense_reference(&g, &x0, &traj) < 1e-6);
}

#[test]
fn root_trajectory_is_bitwise_independent_of_the_network() {
    let agent = double_integrator();
    let proto = static_design(&agent);
    let tree = chain(&[1.0, 2.0]);
    let delays = chain_delays(&tree, &[0.3, 1.1]);
    let cfg = SimConfig::new(0.01, 6.0);
    let x0 = v(&[0.3, -0.7]);
    let net = simulate_homogeneous_static(
        &tree,
        &delays,
        &agent,
        &proto,
        &[x0.clone(), v(&[1.0, 1.0]), v(&[-2.0, 0.0])],
        &cfg,
    )
    .unwrap();
    let lone = SpanningTreeNetwork::from_weights(Mat::zeros(1, 1), 1.0, None).unwrap();
    let alone =
        simulate_homogeneous_static(&lone, &DelayAssignment::zero(&lone), &agent, &proto, &[x0], &cfg).unwrap();
    let offset = net.history_len;
    for (k, s) in alone.agents[0].states.iter().enumerate() {
        assert_eq!(s, &net.agents[0].states[k + offset]);
    }
}

#[test]
fn step_limit_and_divergence_are_reported() {
    let agent = double_integrator();
    let proto = static_design(&agent);
    let tree = chain(&[1.0]);
    let delays = chain_delays(&tree, &[0.2]);
    let inits = [v(&[0.0, 0.0]), v(&[1.0, 0.0])];
    let err = simulate_homogeneous_static(&tree, &delays, &agent, &proto, &inits, &SimConfig::new(0.06, 1.0))
        .unwrap_err();
    assert!(matches!(err, SimError::StepTooLarge { .. }));

    let unstable = AgentModel::full_state(m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap();
    let bad = StaticProtocol {
        f: m(1, 1, &[0.0]),
        ..static_design(&AgentModel::full_state(m(1, 1, &[0.0]), m(1, 1, &[1.0])).unwrap())
    };
    let err = simulate_homogeneous_static(
        &tree,
        &delays,
        &unstable,
        &bad,
        &[v(&[1.0]), v(&[1.0])],
        &SimConfig::new(0.05, 40.0),
    )
    .unwrap_err();
    assert!(matches!(err, SimError::NonFinite { agent: 0, .. }));
}

#[test]
fn coupling_signal_examples() {
    // A = 0 keeps both agents still; agent 1 has a ramp history.
    let agent = AgentModel::full_state(m(1, 1, &[0.0]), m(1, 1, &[1.0])).unwrap();
    let proto = StaticProtocol {
        f: m(1, 1, &[0.0]),
        ..static_design(&agent)
    };
    let tree = chain(&[1.0]);
    let delays = chain_delays(&tree, &[1.0]);
    let mut cfg = SimConfig::new(0.01, 2.0);
    cfg.history = HistoryPolicy::Function(Arc::new(|i, t| v(&[if i == 0 { t } else { 3.0 }])));
    let traj = simulate_homogeneous_static(&tree, &delays, &agent, &proto, &[v(&[0.0]), v(&[3.0])], &cfg).unwrap();
    for t in [0.0, 0.25, 0.5, 0.937] {
        let zeta = coupling_signal(&traj, &tree, &delays, t, 1).unwrap();
        assert!((zeta[0] - (3.0 - (t - 1.0))).abs() < 1e-9, "t = {t}: {zeta}");
    }
    assert_eq!(coupling_signal(&traj, &tree, &delays, 0.5, 0).unwrap(), v(&[0.0]));

    // constant history everywhere: no coupling before anything moves
    let cfg = SimConfig::new(0.01, 2.0);
    let traj = simulate_homogeneous_static(&tree, &delays, &agent, &proto, &[v(&[2.0]), v(&[2.0])], &cfg).unwrap();
    assert_eq!(coupling_signal(&traj, &tree, &delays, -0.5, 1).unwrap_err(), SimError::HistoryUnderrun {
        t: -1.5,
        start: -1.0
    });
    assert_eq!(coupling_signal(&traj, &tree, &delays, 0.5, 1).unwrap(), v(&[0.0]));
}

#[test]
fn zero_delay_coupling_is_diffusive() {
    let agent = double_integrator();
    let proto = static_design(&agent);
    let tree = chain(&[2.0]);
    let delays = DelayAssignment::zero(&tree);
    let traj = simulate_homogeneous_static(
        &tree,
        &delays,
        &agent,
        &proto,
        &[v(&[1.0, 0.0]), v(&[0.0, 1.0])],
        &SimConfig::new(0.01, 1.0),
    )
    .unwrap();
    let t = 0.4;
    let expect = (traj.output_at(1, t).unwrap() - traj.output_at(0, t).unwrap()) * 2.0;
    assert_eq!(coupling_signal(&traj, &tree, &delays, t, 1).unwrap(), expect);
}

#[test]
fn halving_the_step_gives_fourth_order_convergence() {
    let agent = double_integrator();
    let proto = static_design(&agent);
    let tree = chain(&[1.0, 1.0]);
    // breakpoints on every grid, otherwise a kink mid-step costs an order
    let delays = chain_delays(&tree, &[0.4, 0.8]);
    let inits = [v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[-1.0, 0.5])];
    let run = |h: f64| {
        simulate_homogeneous_static(&tree, &delays, &agent, &proto, &inits, &SimConfig::new(h, 6.0)).unwrap()
    };
    let (coarse, fine, reference) = (run(0.04), run(0.02), run(0.01));
    let err = |traj: &Trajectory| {
        let mut worst: f64 = 0.0;
        for (k, &t) in traj.times.iter().enumerate().skip(traj.history_len) {
            for i in 0..3 {
                let e = (&traj.agents[i].states[k] - reference.state_at(i, t).unwrap()).norm();
                worst = worst.max(e);
            }
        }
        worst
    };
    let ratio = err(&coarse) / err(&fine);
    assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn stride_subsamples_the_grid() {
    let agent = double_integrator();
    let proto = static_design(&agent);
    let tree = chain(&[1.0]);
    let delays = chain_delays(&tree, &[0.4]);
    let mut cfg = SimConfig::new(0.01, 2.0);
    let inits = [v(&[1.0, 0.0]), v(&[0.0, 1.0])];
    let full = simulate_homogeneous_static(&tree, &delays, &agent, &proto, &inits, &cfg).unwrap();
    cfg.sample_stride = 5;
    let sparse = simulate_homogeneous_static(&tree, &delays, &agent, &proto, &inits, &cfg).unwrap();
    assert_eq!(sparse.dt, 0.05);
    let k = sparse.origin() + 20;
    assert_eq!(sparse.agents[1].states[k], full.agents[1].states[full.origin() + 100]);
    assert!((sparse.times[k] - 1.0).abs() < 1e-12);
}
