//! Distributed solver for constraint-coupled optimization.
//!
//! N agents each hold a private strongly convex cost f_i and a block A_i of
//! a global equality constraint Σ A_i x_i = b. They cooperate over a sparse
//! communication graph to reach the saddle point of the global Lagrangian,
//! exchanging only small consensus messages with direct neighbors: no
//! central coordinator ever sees the full problem.
//!
//! Module map:
//!
//! - [`graph`]: connected undirected topologies with a canonical directed
//!   edge ordering.
//! - [`problem`]: local costs, constraint blocks, instance validation, and
//!   generators (seeded quadratics, a power-balance showcase).
//! - [`oracle`]: centralized references, both the closed-form KKT solve and
//!   an averaged primal-dual iteration for non-quadratic costs.
//! - [`agent`]: the per-agent state and the four local update operations.
//! - [`network`]: deterministic simulation of synchronous rounds and
//!   randomized activation with lossy links, plus trace output.
//! - [`analysis`]: the aggregate linear form of the message dynamics, its
//!   spectral split, and numerical convergence certificates.
//! - [`plot`]: dependency-free SVG line plots for the traces.
//! - [`cli`]: the JSON-configured experiment driver behind the binary.

pub mod agent;
pub mod analysis;
pub mod cli;
pub mod graph;
pub mod network;
pub mod oracle;
pub mod plot;
pub mod problem;
