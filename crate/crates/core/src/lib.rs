//! Synthesis and numerical validation of synchronization protocols for linear
//! multi-agent systems coupled over a directed spanning tree with unknown,
//! nonuniform, constant communication delays.
//!
//! The crate is organized bottom-up:
//!
//! * [`netgraph`] builds and validates spanning-tree topologies, Laplacians and
//!   cumulative root delays.
//! * [`matops`] holds the dense linear-algebra kernels (Sylvester, Lyapunov,
//!   Riccati, regulator equations, null spaces, matrix exponential).
//! * [`protocols`] synthesizes the static full-state, dynamic partial-state and
//!   heterogeneous output-regulation protocols.
//! * [`ddesim`] integrates the delayed closed-loop network.
//! * [`analysis`] measures delayed synchronization and emits certificates.
//! * [`scenario`] and [`pipeline`] drive everything from a scenario file.
//!
//! Batch workloads (random-instance sweeps, grid certificates, simulation
//! batches) go through [`exec`], which uses rayon when the `parallel` feature
//! is enabled and falls back to plain iteration otherwise.

pub mod analysis;
pub mod ddesim;
pub mod exec;
pub mod matops;
pub mod netgraph;
pub mod pipeline;
pub mod protocols;
pub mod scenario;

pub use matops::{Mat, Vector};
