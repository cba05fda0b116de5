//! The per-agent state machine of the distributed algorithm.
//!
//! Each agent keeps its local decision x_i, a multiplier estimate λ_i, and
//! one consensus slot z_ij per neighbor. A round has three pure phases:
//!
//! ```text
//!   proxy:   [s_x; s_λ] = (1/(1+ρ·deg_i)) ([A_i x_i − b_i; λ_i] + Σ_j z_ij)
//!   step:    x_i⁺ = x_i − γ(∇f_i(x_i) + A_iᵀ s_λ)
//!            λ_i⁺ = λ_i + γ(κ(s_λ − λ_i) + s_x)
//!   gossip:  send m_ij = −z_ij + 2ρ[s_x; s_λ],
//!            on receipt z_ij⁺ = (1−β)z_ij + β·m_ji
//! ```
//!
//! The proxies substitute for the global averages (1/N)(Ax − b) and
//! (1/N)Σλ_j that a centralized method would use. The dual row ascends:
//! λ moves along +γ times the consensus-tracked Lagrangian gradient.
//! Dropped messages simply skip the z-update, which is what makes the
//! scheme robust to lossy links.

use std::collections::BTreeMap;

use nalgebra::DVector;
use thiserror::Error;

use crate::problem::ProblemInstance;

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("node {j} is not a neighbor of agent {i}")]
    NotANeighbor { i: usize, j: usize },
    #[error("message addressed to {to} handed to agent {id}")]
    MisdeliveredMessage { to: usize, id: usize },
    #[error("non-finite value in agent {0} state")]
    NonFiniteState(usize),
    #[error("payload has length {got}, consensus slots hold {expected}")]
    PayloadDimension { got: usize, expected: usize },
}

/// One agent's complete local state.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub id: usize,
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Consensus slot per neighbor, keyed ascending; each entry is 2m long.
    pub z: BTreeMap<usize, DVector<f64>>,
}

/// Local stand-ins for the global constraint residual share and the
/// multiplier average.
#[derive(Debug, Clone, PartialEq)]
pub struct Proxy {
    pub s_x: DVector<f64>,
    pub s_lambda: DVector<f64>,
}

impl Proxy {
    /// The proxy pair stacked as one 2m-vector, the layout messages use.
    pub fn stacked(&self) -> DVector<f64> {
        let m = self.s_x.len();
        let mut v = DVector::zeros(2 * m);
        v.rows_mut(0, m).copy_from(&self.s_x);
        v.rows_mut(m, m).copy_from(&self.s_lambda);
        v
    }
}

/// A point-to-point payload for one directed edge at one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    pub payload: DVector<f64>,
    pub tick: u64,
}

impl AgentState {
    /// Zero-initialized state matching the instance's dimensions: x_i = 0,
    /// λ_i = 0, one zero slot per neighbor.
    pub fn zero_init(id: usize, p: &ProblemInstance) -> Self {
        let m = p.constraint_dim();
        let z = p
            .graph()
            .neighbors(id)
            .expect("agent id within graph")
            .iter()
            .map(|&j| (j, DVector::zeros(2 * m)))
            .collect();
        AgentState {
            id,
            x: DVector::zeros(p.local_dim(id)),
            lambda: DVector::zeros(m),
            z,
        }
    }

    /// True when every stored value is finite.
    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite())
            && self.lambda.iter().all(|v| v.is_finite())
            && self.z.values().all(|z| z.iter().all(|v| v.is_finite()))
    }

    /// Largest absolute value across x, λ, and the consensus slots.
    pub fn magnitude(&self) -> f64 {
        let x_mag = self.x.abs().max();
        let l_mag = self.lambda.abs().max();
        self.z
            .values()
            .map(|z| z.abs().max())
            .fold(x_mag.max(l_mag), f64::max)
    }
}

/// Closed-form proxy of the global averages from local state alone.
pub fn compute_proxy(s: &AgentState, p: &ProblemInstance, rho: f64) -> Proxy {
    let m = p.constraint_dim();
    let residual = p.a_block(s.id) * &s.x - p.b_allot(s.id);
    let mut numerator = DVector::zeros(2 * m);
    numerator.rows_mut(0, m).copy_from(&residual);
    numerator.rows_mut(m, m).copy_from(&s.lambda);
    for z in s.z.values() {
        numerator += z;
    }
    let scale = 1.0 / (1.0 + rho * s.z.len() as f64);
    Proxy {
        s_x: DVector::from(numerator.rows(0, m)) * scale,
        s_lambda: DVector::from(numerator.rows(m, m)) * scale,
    }
}

/// Moves (x_i, λ_i) one step along the proxied primal-dual field; the
/// consensus slots are untouched.
pub fn primal_dual_step(
    s: &AgentState,
    pr: &Proxy,
    p: &ProblemInstance,
    gamma: f64,
    kappa: f64,
) -> Result<AgentState, AgentError> {
    let grad = p.cost(s.id).grad(&s.x);
    let x_next = &s.x - gamma * (grad + p.a_block(s.id).transpose() * &pr.s_lambda);
    let lambda_next = &s.lambda + gamma * (kappa * (&pr.s_lambda - &s.lambda) + &pr.s_x);
    let next = AgentState {
        id: s.id,
        x: x_next,
        lambda: lambda_next,
        z: s.z.clone(),
    };
    if !next.is_finite() {
        return Err(AgentError::NonFiniteState(s.id));
    }
    Ok(next)
}

/// Builds the payload for neighbor `j`: the sender's slot reflected through
/// twice the proxy.
pub fn make_message(
    s: &AgentState,
    pr: &Proxy,
    rho: f64,
    j: usize,
    tick: u64,
) -> Result<Message, AgentError> {
    let z_ij = s.z.get(&j).ok_or(AgentError::NotANeighbor { i: s.id, j })?;
    let payload = pr.stacked() * (2.0 * rho) - z_ij;
    Ok(Message {
        from: s.id,
        to: j,
        payload,
        tick,
    })
}

/// Relaxes the sender's slot toward the received payload:
/// z ← (1−β)z + β·payload. x_i and λ_i are untouched.
pub fn receive(s: &AgentState, msg: &Message, beta: f64) -> Result<AgentState, AgentError> {
    if msg.to != s.id {
        return Err(AgentError::MisdeliveredMessage {
            to: msg.to,
            id: s.id,
        });
    }
    let current = s.z.get(&msg.from).ok_or(AgentError::NotANeighbor {
        i: s.id,
        j: msg.from,
    })?;
    if msg.payload.len() != current.len() {
        return Err(AgentError::PayloadDimension {
            got: msg.payload.len(),
            expected: current.len(),
        });
    }
    let mut next = s.clone();
    next.z
        .insert(msg.from, current * (1.0 - beta) + &msg.payload * beta);
    Ok(next)
}
