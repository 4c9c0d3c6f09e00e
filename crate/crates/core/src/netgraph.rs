//! Directed-spanning-tree topologies, Laplacians and delay bookkeeping.
//!
//! Agents are indexed from zero internally; agent `0` is always the root.
//! Scenario files and reports use one-based labels.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::matops::Mat;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid weight matrix: {0}")]
    InvalidWeights(String),
    #[error("not a directed spanning tree rooted at agent 1: {0}")]
    NotATree(String),
    #[error("bound violation: l_{agent}{agent} = {value} is outside [{beta}, {alpha}]", agent = .agent + 1)]
    BoundViolation {
        agent: usize,
        value: f64,
        beta: f64,
        alpha: f64,
    },
    #[error("invalid graph-class bounds: {0}")]
    InvalidBounds(String),
    #[error("edge {child} <- {parent} has no delay assigned", child = .0 + 1, parent = .1 + 1)]
    MissingDelay(usize, usize),
    #[error("delay assigned to {child} <- {parent}, which is not a tree edge", child = .0 + 1, parent = .1 + 1)]
    NotAnEdge(usize, usize),
    #[error("delay on edge {child} <- {parent} must be finite and nonnegative, got {value}", child = .0 + 1, parent = .1 + 1, value = .2)]
    InvalidDelay(usize, usize, f64),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Weighted digraph with `a_ij > 0` iff agent `i` receives from agent `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDigraph {
    weights: Mat,
}

impl WeightedDigraph {
    pub fn new(weights: Mat) -> Result<Self> {
        if weights.nrows() != weights.ncols() || weights.nrows() == 0 {
            return Err(NetError::InvalidWeights(format!(
                "weights must be square and nonempty, got {}x{}",
                weights.nrows(),
                weights.ncols()
            )));
        }
        for i in 0..weights.nrows() {
            if weights[(i, i)] != 0.0 {
                return Err(NetError::InvalidWeights(format!("a_{0}{0} must be zero", i + 1)));
            }
            for j in 0..weights.ncols() {
                let w = weights[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return Err(NetError::InvalidWeights(format!(
                        "a_{}{} = {w} must be finite and nonnegative",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(Self { weights })
    }

    pub fn n_agents(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    /// Weight of the edge `j → i` (zero when absent).
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }
}

/// `ℓ_ii = Σ_k a_ik`, `ℓ_ij = −a_ij`.
pub fn build_laplacian(graph: &WeightedDigraph) -> Mat {
    let a = graph.weights();
    let n = a.nrows();
    let mut l = -a.clone();
    for i in 0..n {
        l[(i, i)] = a.row(i).sum();
    }
    l
}

/// A validated spanning tree rooted at agent 0 together with its graph-class
/// bounds `β ≤ ℓ_ii (≤ α)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanningTreeNetwork {
    graph: WeightedDigraph,
    laplacian: Mat,
    ordering: Vec<usize>,
    parents: Vec<Option<usize>>,
    beta: f64,
    alpha: Option<f64>,
}

/// Validate that `laplacian` belongs to a directed spanning tree rooted at
/// agent 0 and satisfies the graph-class bounds.
///
/// The returned ordering lists agents so that the permuted Laplacian is lower
/// triangular. It is found by repeatedly peeling agents whose parent has
/// already been placed, smallest index first.
pub fn validate_spanning_tree(laplacian: &Mat, beta: f64, alpha: Option<f64>) -> Result<SpanningTreeNetwork> {
    let n = laplacian.nrows();
    if n == 0 || laplacian.ncols() != n {
        return Err(NetError::InvalidWeights("Laplacian must be square and nonempty".into()));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(NetError::InvalidBounds(format!("beta must be positive, got {beta}")));
    }
    if let Some(alpha) = alpha {
        if !(alpha.is_finite() && alpha > beta) {
            return Err(NetError::InvalidBounds(format!(
                "alpha must exceed beta, got alpha = {alpha}, beta = {beta}"
            )));
        }
    }
    let scale = laplacian.amax().max(1.0);
    for i in 0..n {
        let row_sum: f64 = laplacian.row(i).sum();
        if row_sum.abs() > ROW_SUM_TOL * scale * n as f64 {
            return Err(NetError::InvalidWeights(format!(
                "row {} of the Laplacian sums to {row_sum}",
                i + 1
            )));
        }
    }

    let mut weights = Mat::zeros(n, n);
    let mut parents = vec![None; n];
    for i in 0..n {
        let mut incoming = Vec::new();
        for j in (0..n).filter(|&j| j != i) {
            let l = laplacian[(i, j)];
            if l > 0.0 || !l.is_finite() {
                return Err(NetError::InvalidWeights(format!(
                    "off-diagonal l_{}{} = {l} must be nonpositive",
                    i + 1,
                    j + 1
                )));
            }
            if l < 0.0 {
                weights[(i, j)] = -l;
                incoming.push(j);
            }
        }
        match (i, incoming.as_slice()) {
            (0, []) => {}
            (0, _) => {
                return Err(NetError::NotATree(
                    "agent 1 must be the root and have no incoming edges".into(),
                ))
            }
            (_, [j]) => parents[i] = Some(*j),
            (_, []) => {
                return Err(NetError::NotATree(format!(
                    "agent {} has no parent, so the root is not unique",
                    i + 1
                )))
            }
            (_, many) => {
                return Err(NetError::NotATree(format!(
                    "agent {} has {} parents",
                    i + 1,
                    many.len()
                )))
            }
        }
    }

    let mut ordering = vec![0];
    let mut placed = vec![false; n];
    placed[0] = true;
    while ordering.len() < n {
        let next = (0..n).find(|&i| !placed[i] && parents[i].is_some_and(|p| placed[p]));
        match next {
            Some(i) => {
                placed[i] = true;
                ordering.push(i);
            }
            None => {
                let stranded: Vec<String> = (0..n).filter(|&i| !placed[i]).map(|i| (i + 1).to_string()).collect();
                return Err(NetError::NotATree(format!(
                    "agents {} are not reachable from agent 1",
                    stranded.join(", ")
                )));
            }
        }
    }

    for i in 1..n {
        let d = laplacian[(i, i)];
        let upper = alpha.unwrap_or(f64::INFINITY);
        if d < beta || d > upper {
            return Err(NetError::BoundViolation {
                agent: i,
                value: d,
                beta,
                alpha: upper,
            });
        }
    }

    Ok(SpanningTreeNetwork {
        graph: WeightedDigraph::new(weights)?,
        laplacian: laplacian.clone(),
        ordering,
        parents,
        beta,
        alpha,
    })
}

impl SpanningTreeNetwork {
    /// Build from a weight matrix in one step.
    pub fn from_weights(weights: Mat, beta: f64, alpha: Option<f64>) -> Result<Self> {
        let graph = WeightedDigraph::new(weights)?;
        validate_spanning_tree(&build_laplacian(&graph), beta, alpha)
    }

    pub fn n_agents(&self) -> usize {
        self.parents.len()
    }

    pub fn graph(&self) -> &WeightedDigraph {
        &self.graph
    }

    /// Laplacian in the caller's agent labelling.
    pub fn laplacian(&self) -> &Mat {
        &self.laplacian
    }

    /// Agents in tree order: every agent appears after its parent.
    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parents[i]
    }

    /// `(parent, a_ij)` for every non-root agent.
    pub fn parent_edge(&self, i: usize) -> Option<(usize, f64)> {
        self.parents[i].map(|j| (j, self.graph.weight(i, j)))
    }

    /// Tree edges as `(child, parent)` pairs in tree order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.ordering
            .iter()
            .filter_map(|&i| self.parents[i].map(|j| (i, j)))
            .collect()
    }

    /// Diagonal entry `ℓ_ii`.
    pub fn degree(&self, i: usize) -> f64 {
        self.laplacian[(i, i)]
    }

    /// Laplacian permuted into tree order; lower triangular with a zero first row.
    pub fn ordered_laplacian(&self) -> Mat {
        let n = self.n_agents();
        Mat::from_fn(n, n, |r, c| self.laplacian[(self.ordering[r], self.ordering[c])])
    }

    /// Path from `i` up to the root, starting with `i` itself.
    pub fn root_path(&self, i: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut cur = i;
        while let Some(p) = self.parents[cur] {
            path.push(p);
            cur = p;
        }
        path
    }
}

/// `L_Q`: the tree-ordered Laplacian with its first row and column removed.
pub fn reduced_laplacian(tree: &SpanningTreeNetwork) -> Mat {
    let l = tree.ordered_laplacian();
    let n = l.nrows();
    l.view((1, 1), (n - 1, n - 1)).into_owned()
}

/// Per-edge delays together with the cumulative delay from each agent to the
/// root along its unique path.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayAssignment {
    edge_delays: BTreeMap<(usize, usize), f64>,
    root_delays: Vec<f64>,
}

impl DelayAssignment {
    /// Delay on the edge `parent → child`.
    pub fn edge_delay(&self, child: usize, parent: usize) -> Option<f64> {
        self.edge_delays.get(&(child, parent)).copied()
    }

    pub fn edge_delays(&self) -> &BTreeMap<(usize, usize), f64> {
        &self.edge_delays
    }

    /// `τ̄_{i,1}` for every agent; zero for the root.
    pub fn root_delays(&self) -> &[f64] {
        &self.root_delays
    }

    pub fn max_root_delay(&self) -> f64 {
        self.root_delays.iter().copied().fold(0.0, f64::max)
    }

    /// Smallest strictly positive edge delay, if any.
    pub fn min_positive_delay(&self) -> Option<f64> {
        self.edge_delays
            .values()
            .copied()
            .filter(|&d| d > 0.0)
            .min_by(|a, b| a.total_cmp(b))
    }

    /// Lag between any two agents, `τ̄_i − τ̄_j`; may be negative off the tree.
    pub fn pair_lag(&self, i: usize, j: usize) -> f64 {
        self.root_delays[i] - self.root_delays[j]
    }

    /// Every edge delay multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            edge_delays: self.edge_delays.iter().map(|(&k, &v)| (k, v * factor)).collect(),
            root_delays: self.root_delays.iter().map(|v| v * factor).collect(),
        }
    }

    /// All edges with zero delay.
    pub fn zero(tree: &SpanningTreeNetwork) -> Self {
        let edges = tree.edges().into_iter().map(|e| (e, 0.0)).collect();
        cumulative_root_delays(tree, &edges).expect("every tree edge is assigned")
    }
}

/// Sum edge delays along every root path.
///
/// `edge_delays` is keyed by `(child, parent)`.
pub fn cumulative_root_delays(
    tree: &SpanningTreeNetwork,
    edge_delays: &BTreeMap<(usize, usize), f64>,
) -> Result<DelayAssignment> {
    for (&(i, j), &tau) in edge_delays {
        if i >= tree.n_agents() || tree.parent(i) != Some(j) {
            return Err(NetError::NotAnEdge(i, j));
        }
        if !tau.is_finite() || tau < 0.0 {
            return Err(NetError::InvalidDelay(i, j, tau));
        }
    }
    let mut root_delays = vec![0.0; tree.n_agents()];
    for &i in tree.ordering().iter().skip(1) {
        let j = tree.parent(i).expect("non-root agents have a parent");
        let tau = *edge_delays.get(&(i, j)).ok_or(NetError::MissingDelay(i, j))?;
        root_delays[i] = root_delays[j] + tau;
    }
    Ok(DelayAssignment {
        edge_delays: edge_delays.clone(),
        root_delays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Mat {
        Mat::from_row_slice(rows, cols, data)
    }

    fn chain3() -> Mat {
        m(3, 3, &[0.0, 0.0, 0.0, -2.0, 2.0, 0.0, 0.0, -3.0, 3.0])
    }

    #[test]
    fn laplacian_examples() {
        let g = WeightedDigraph::new(m(2, 2, &[0.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(build_laplacian(&g), m(2, 2, &[0.0, 0.0, -1.0, 1.0]));
        let g = WeightedDigraph::new(Mat::zeros(3, 3)).unwrap();
        assert_eq!(build_laplacian(&g), Mat::zeros(3, 3));
        let g = WeightedDigraph::new(m(3, 3, &[0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 0.0])).unwrap();
        assert_eq!(build_laplacian(&g), chain3());
    }

    #[test]
    fn weights_are_validated() {
        assert!(WeightedDigraph::new(m(2, 2, &[1.0, 0.0, 0.0, 0.0])).is_err());
        assert!(WeightedDigraph::new(m(2, 2, &[0.0, -1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn validate_examples() {
        let t = validate_spanning_tree(&m(2, 2, &[0.0, 0.0, -1.0, 1.0]), 0.5, None).unwrap();
        assert_eq!(t.ordering(), &[0, 1]);

        let two_parents = m(3, 3, &[0.0, 0.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert!(matches!(
            validate_spanning_tree(&two_parents, 0.5, None),
            Err(NetError::NotATree(_))
        ));

        let err = validate_spanning_tree(&chain3(), 2.5, None).unwrap_err();
        assert!(matches!(err, NetError::BoundViolation { agent: 1, value, .. } if value == 2.0));
        let err = validate_spanning_tree(&chain3(), 1.0, Some(2.5)).unwrap_err();
        assert!(matches!(err, NetError::BoundViolation { agent: 2, .. }));
    }

    #[test]
    fn ordering_handles_relabelled_tree() {
        // 1 -> 3 -> 2: agent 3 must be placed before agent 2
        let l = m(3, 3, &[0.0, 0.0, 0.0, 0.0, 1.0, -1.0, -1.0, 0.0, 1.0]);
        let t = validate_spanning_tree(&l, 1.0, None).unwrap();
        assert_eq!(t.ordering(), &[0, 2, 1]);
        let lo = t.ordered_laplacian();
        for r in 0..3 {
            for c in r + 1..3 {
                assert_eq!(lo[(r, c)], 0.0);
            }
        }
    }

    #[test]
    fn cycles_and_foreign_roots_are_rejected() {
        // 2 and 3 feed each other; nothing reaches them from 1
        let l = m(3, 3, &[0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.0, -1.0, 1.0]);
        assert!(matches!(validate_spanning_tree(&l, 0.5, None), Err(NetError::NotATree(_))));
        // agent 2 is the root
        let l = m(2, 2, &[1.0, -1.0, 0.0, 0.0]);
        assert!(matches!(validate_spanning_tree(&l, 0.5, None), Err(NetError::NotATree(_))));
    }

    #[test]
    fn root_delay_examples() {
        let t = validate_spanning_tree(&m(2, 2, &[0.0, 0.0, -1.0, 1.0]), 0.5, None).unwrap();
        let d = cumulative_root_delays(&t, &BTreeMap::from([((1, 0), 0.7)])).unwrap();
        assert_eq!(d.root_delays(), &[0.0, 0.7]);

        let t = validate_spanning_tree(&chain3(), 1.0, None).unwrap();
        let d = cumulative_root_delays(&t, &BTreeMap::from([((1, 0), 0.3), ((2, 1), 1.1)])).unwrap();
        assert_eq!(d.root_delays()[0], 0.0);
        assert_eq!(d.root_delays()[1], 0.3);
        assert!((d.root_delays()[2] - 1.4).abs() < 1e-15);

        let z = DelayAssignment::zero(&t);
        assert_eq!(z.root_delays(), &[0.0, 0.0, 0.0]);

        assert_eq!(
            cumulative_root_delays(&t, &BTreeMap::from([((1, 0), 0.3)])).unwrap_err(),
            NetError::MissingDelay(2, 1)
        );
        assert_eq!(
            cumulative_root_delays(&t, &BTreeMap::from([((2, 0), 0.3)])).unwrap_err(),
            NetError::NotAnEdge(2, 0)
        );
    }

    #[test]
    fn reduced_laplacian_examples() {
        let t = validate_spanning_tree(&chain3(), 1.0, None).unwrap();
        assert_eq!(reduced_laplacian(&t), m(2, 2, &[2.0, 0.0, -3.0, 3.0]));

        let t = validate_spanning_tree(&m(2, 2, &[0.0, 0.0, -1.5, 1.5]), 1.0, None).unwrap();
        assert_eq!(reduced_laplacian(&t), m(1, 1, &[1.5]));

        let mut w = Mat::zeros(4, 4);
        for i in 1..4 {
            w[(i, 0)] = 1.0;
        }
        let t = SpanningTreeNetwork::from_weights(w, 1.0, None).unwrap();
        assert_eq!(reduced_laplacian(&t), Mat::identity(3, 3));
    }
}
