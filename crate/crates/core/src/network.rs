//! Deterministic simulated network harness.
//!
//! Drives a population of agents either in lock-step rounds or under random
//! activation with lossy links. One seeded generator per run, consumed in a
//! fixed order (agents ascending, then directed edges ascending, every tick,
//! regardless of who is active), makes every trajectory bitwise reproducible
//! from its seed.
//!
//! Synchronous ticks use snapshot semantics: proxies and payloads are read
//! from the tick-t state, then every agent steps, then every slot update is
//! applied. Reordering agents within a tick cannot change the result.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    compute_proxy, make_message, primal_dual_step, receive, AgentError, AgentState, Message,
};
use crate::oracle::{SaddlePoint, DIVERGENCE_LIMIT};
use crate::problem::{global_residual, ProblemError, ProblemInstance};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("trace output failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Step sizes and gains shared by every agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepParams {
    pub gamma: f64,
    pub kappa: f64,
    pub rho: f64,
    pub beta: f64,
}

impl StepParams {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.gamma <= 0.0 || self.gamma.is_nan() {
            return Err(NetworkError::BadParameter(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if self.kappa <= 0.0 || self.kappa.is_nan() {
            return Err(NetworkError::BadParameter(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if self.rho <= 0.0 || self.rho.is_nan() {
            return Err(NetworkError::BadParameter(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(NetworkError::BadParameter(format!(
                "beta must lie in (0, 1), got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Who gets to act each tick, and how lossy the links are.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    Synchronous,
    /// Each agent is independently active with probability `p_act` per tick.
    Asynchronous {
        p_act: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleModel {
    pub kind: ScheduleKind,
    /// Independent per-message loss probability on every directed edge.
    pub p_drop: f64,
    pub seed: u64,
}

impl ScheduleModel {
    pub fn synchronous() -> Self {
        ScheduleModel {
            kind: ScheduleKind::Synchronous,
            p_drop: 0.0,
            seed: 0,
        }
    }

    pub fn asynchronous(p_act: f64, p_drop: f64, seed: u64) -> Self {
        ScheduleModel {
            kind: ScheduleKind::Asynchronous { p_act },
            p_drop,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if let ScheduleKind::Asynchronous { p_act } = self.kind {
            if !(0.0..=1.0).contains(&p_act) {
                return Err(NetworkError::BadParameter(format!(
                    "p_act must lie in [0, 1], got {p_act}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(NetworkError::BadParameter(format!(
                "p_drop must lie in [0, 1), got {}",
                self.p_drop
            )));
        }
        Ok(())
    }
}

/// Complete simulation state at one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub problem: Arc<ProblemInstance>,
    pub agents: Vec<AgentState>,
    pub tick: u64,
}

impl WorldState {
    /// All agents at zero: x_i = 0, λ_i = 0, empty consensus slots.
    pub fn zero_init(problem: Arc<ProblemInstance>) -> Self {
        let agents = (0..problem.n_agents())
            .map(|i| AgentState::zero_init(i, &problem))
            .collect();
        WorldState {
            problem,
            agents,
            tick: 0,
        }
    }

    /// Stacked primal point col(x_1, …, x_N).
    pub fn stacked_x(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.problem.total_primal_dim());
        for (i, a) in self.agents.iter().enumerate() {
            x.rows_mut(self.problem.agent_range(i).start, a.x.len())
                .copy_from(&a.x);
        }
        x
    }

    /// Stacked multiplier copies col(λ_1, …, λ_N).
    pub fn stacked_lambda(&self) -> DVector<f64> {
        let m = self.problem.constraint_dim();
        let mut l = DVector::zeros(self.agents.len() * m);
        for (i, a) in self.agents.iter().enumerate() {
            l.rows_mut(i * m, m).copy_from(&a.lambda);
        }
        l
    }

    /// Consensus slots stacked in the canonical directed-edge order: entry
    /// for edge (i, j) is agent i's slot keyed by j.
    pub fn stacked_z(&self) -> DVector<f64> {
        let m = self.problem.constraint_dim();
        let edges = self.problem.graph().directed_edges();
        let mut z = DVector::zeros(2 * m * edges.len());
        for (e, &(i, j)) in edges.iter().enumerate() {
            z.rows_mut(2 * m * e, 2 * m)
                .copy_from(&self.agents[i].z[&j]);
        }
        z
    }

    /// Writes a stacked consensus vector back into the per-agent slots.
    pub fn set_stacked_z(&mut self, z: &DVector<f64>) -> Result<(), NetworkError> {
        let m = self.problem.constraint_dim();
        let edges = self.problem.graph().directed_edges();
        if z.len() != 2 * m * edges.len() {
            return Err(NetworkError::BadParameter(format!(
                "stacked consensus vector has length {}, expected {}",
                z.len(),
                2 * m * edges.len()
            )));
        }
        for (e, &(i, j)) in edges.iter().enumerate() {
            self.agents[i]
                .z
                .insert(j, DVector::from(z.rows(2 * m * e, 2 * m)));
        }
        Ok(())
    }

    /// Squared primal distance to the reference point, Σ_i ‖x_i − x_i*‖².
    pub fn d_metric(&self, reference: &SaddlePoint) -> f64 {
        (self.stacked_x() - &reference.x_star).norm_squared()
    }

    /// Largest absolute value across all agents' state.
    pub fn magnitude(&self) -> f64 {
        self.agents
            .iter()
            .map(AgentState::magnitude)
            .fold(0.0, f64::max)
    }
}

/// Per-tick activity numbers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TickStats {
    pub active_count: usize,
    pub dropped_count: usize,
}

/// One row of the convergence trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub tick: u64,
    /// Σ_i ‖x_i − x_i*‖².
    pub d: f64,
    /// ‖Ax − b‖.
    pub primal_residual: f64,
    /// max_{i,j} ‖λ_i − λ_j‖.
    pub lambda_consensus_err: f64,
    /// ‖col(λ_i) − 1⊗λ*‖.
    pub gap_to_lambda_star: f64,
    pub active_count: usize,
    pub dropped_count: usize,
}

impl TraceRecord {
    pub fn is_finite(&self) -> bool {
        self.d.is_finite()
            && self.primal_residual.is_finite()
            && self.lambda_consensus_err.is_finite()
            && self.gap_to_lambda_star.is_finite()
    }
}

/// Terminal status of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RunStatus {
    Converged,
    MaxIter,
    Diverged,
}

/// Full record sequence plus the terminal status and state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub status: RunStatus,
    pub final_world: WorldState,
}

impl Trace {
    /// Ticks actually executed (the last recorded tick).
    pub fn iterations(&self) -> u64 {
        self.records.last().map_or(0, |r| r.tick)
    }

    /// Final distance metric.
    pub fn final_d(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.d)
    }

    /// First tick at which d dropped to `threshold` or below.
    pub fn first_tick_below(&self, threshold: f64) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.d <= threshold)
            .map(|r| r.tick)
    }
}

/// Stopping rule for `run`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StopRule {
    pub tol_d: f64,
    pub max_iter: u64,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            tol_d: 1e-8,
            max_iter: 1_000_000,
        }
    }
}

fn all_messages(
    w: &WorldState,
    proxies: &[crate::agent::Proxy],
    rho: f64,
) -> Result<Vec<Message>, NetworkError> {
    let mut messages = Vec::with_capacity(w.problem.graph().directed_edge_count());
    for (i, agent) in w.agents.iter().enumerate() {
        for &j in agent.z.keys() {
            messages.push(make_message(agent, &proxies[i], rho, j, w.tick)?);
        }
    }
    Ok(messages)
}

/// Advances every agent one lock-step round.
pub fn step_synchronous(w: &WorldState, params: &StepParams) -> Result<WorldState, NetworkError> {
    params.validate()?;
    let proxies: Vec<_> = w
        .agents
        .iter()
        .map(|a| compute_proxy(a, &w.problem, params.rho))
        .collect();
    let messages = all_messages(w, &proxies, params.rho)?;
    let mut agents = Vec::with_capacity(w.agents.len());
    for (a, pr) in w.agents.iter().zip(&proxies) {
        agents.push(primal_dual_step(
            a,
            pr,
            &w.problem,
            params.gamma,
            params.kappa,
        )?);
    }
    for msg in &messages {
        agents[msg.to] = receive(&agents[msg.to], msg, params.beta)?;
    }
    Ok(WorldState {
        problem: Arc::clone(&w.problem),
        agents,
        tick: w.tick + 1,
    })
}

/// Advances one randomized round: agents activate independently, payloads on
/// directed edges drop independently. Inactive agents are completely frozen
/// and anything addressed to them is discarded.
///
/// The generator is consumed in a fixed order every tick: one activation
/// draw per agent ascending, then one drop draw per directed edge in
/// canonical order, so the stream position never depends on outcomes.
pub fn step_asynchronous(
    w: &WorldState,
    params: &StepParams,
    model: &ScheduleModel,
    rng: &mut ChaCha8Rng,
) -> Result<(WorldState, TickStats), NetworkError> {
    params.validate()?;
    model.validate()?;
    let p_act = match model.kind {
        ScheduleKind::Asynchronous { p_act } => p_act,
        ScheduleKind::Synchronous => {
            return Err(NetworkError::BadParameter(
                "randomized step requires an asynchronous schedule".into(),
            ))
        }
    };
    let active: Vec<bool> = (0..w.agents.len())
        .map(|_| rng.random::<f64>() < p_act)
        .collect();
    let edges = w.problem.graph().directed_edges();
    let dropped: Vec<bool> = edges
        .iter()
        .map(|_| rng.random::<f64>() < model.p_drop)
        .collect();

    let proxies: Vec<_> = w
        .agents
        .iter()
        .map(|a| compute_proxy(a, &w.problem, params.rho))
        .collect();

    let mut dropped_count = 0;
    let mut delivered: Vec<Message> = Vec::new();
    for (e, &(i, j)) in edges.iter().enumerate() {
        if !active[i] {
            continue;
        }
        let msg = make_message(&w.agents[i], &proxies[i], params.rho, j, w.tick)?;
        if dropped[e] {
            dropped_count += 1;
        } else if active[j] {
            delivered.push(msg);
        }
    }

    let mut agents = Vec::with_capacity(w.agents.len());
    for (a, pr) in w.agents.iter().zip(&proxies) {
        if active[a.id] {
            agents.push(primal_dual_step(
                a,
                pr,
                &w.problem,
                params.gamma,
                params.kappa,
            )?);
        } else {
            agents.push(a.clone());
        }
    }
    for msg in &delivered {
        agents[msg.to] = receive(&agents[msg.to], msg, params.beta)?;
    }

    let stats = TickStats {
        active_count: active.iter().filter(|&&a| a).count(),
        dropped_count,
    };
    Ok((
        WorldState {
            problem: Arc::clone(&w.problem),
            agents,
            tick: w.tick + 1,
        },
        stats,
    ))
}

fn record_for(w: &WorldState, reference: &SaddlePoint, stats: TickStats) -> TraceRecord {
    let x = w.stacked_x();
    let primal_residual = global_residual(&w.problem, &x)
        .map(|r| r.norm())
        .unwrap_or(f64::NAN);
    let mut consensus = 0.0f64;
    for (i, a) in w.agents.iter().enumerate() {
        for b in &w.agents[i + 1..] {
            consensus = consensus.max((&a.lambda - &b.lambda).norm());
        }
    }
    let gap_sq: f64 = w
        .agents
        .iter()
        .map(|a| (&a.lambda - &reference.lambda_star).norm_squared())
        .sum();
    TraceRecord {
        tick: w.tick,
        d: w.d_metric(reference),
        primal_residual,
        lambda_consensus_err: consensus,
        gap_to_lambda_star: gap_sq.sqrt(),
        active_count: stats.active_count,
        dropped_count: stats.dropped_count,
    }
}

/// Runs from `w0` until the distance metric falls to `stop.tol_d`, the
/// iteration budget runs out, or the state blows past the divergence limit.
/// Divergence (including non-finite state) is reported as a trace status,
/// not an error; errors are reserved for malformed inputs.
pub fn run(
    w0: WorldState,
    params: &StepParams,
    model: &ScheduleModel,
    reference: &SaddlePoint,
    stop: &StopRule,
) -> Result<Trace, NetworkError> {
    params.validate()?;
    model.validate()?;
    if reference.x_star.len() != w0.problem.total_primal_dim() {
        return Err(NetworkError::BadParameter(format!(
            "reference point has dimension {}, instance has {}",
            reference.x_star.len(),
            w0.problem.total_primal_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let mut records = Vec::new();
    let mut world = w0;

    let first = record_for(&world, reference, TickStats::default());
    if !first.is_finite() {
        return Ok(Trace {
            records,
            status: RunStatus::Diverged,
            final_world: world,
        });
    }
    let mut d = first.d;
    records.push(first);
    if d <= stop.tol_d {
        return Ok(Trace {
            records,
            status: RunStatus::Converged,
            final_world: world,
        });
    }

    while world.tick < stop.max_iter {
        let stepped = match model.kind {
            ScheduleKind::Synchronous => step_synchronous(&world, params).map(|next| {
                let n = next.agents.len();
                (
                    next,
                    TickStats {
                        active_count: n,
                        dropped_count: 0,
                    },
                )
            }),
            ScheduleKind::Asynchronous { .. } => step_asynchronous(&world, params, model, &mut rng),
        };
        let (next, stats) = match stepped {
            Ok(pair) => pair,
            Err(NetworkError::Agent(AgentError::NonFiniteState(_))) => {
                return Ok(Trace {
                    records,
                    status: RunStatus::Diverged,
                    final_world: world,
                })
            }
            Err(e) => return Err(e),
        };
        world = next;
        let record = record_for(&world, reference, stats);
        if !record.is_finite()
            || record.d > DIVERGENCE_LIMIT
            || world.magnitude() > DIVERGENCE_LIMIT
        {
            if record.is_finite() {
                records.push(record);
            }
            return Ok(Trace {
                records,
                status: RunStatus::Diverged,
                final_world: world,
            });
        }
        d = record.d;
        records.push(record);
        if d <= stop.tol_d {
            return Ok(Trace {
                records,
                status: RunStatus::Converged,
                final_world: world,
            });
        }
    }
    Ok(Trace {
        records,
        status: RunStatus::MaxIter,
        final_world: world,
    })
}

/// Halves γ from `gamma0` until a run converges; returns the first working
/// step size with its trace.
pub fn find_converging_gamma(
    w0: &WorldState,
    base: &StepParams,
    model: &ScheduleModel,
    reference: &SaddlePoint,
    stop: &StopRule,
    gamma0: f64,
    max_halvings: u32,
) -> Result<Option<(f64, Trace)>, NetworkError> {
    let mut gamma = gamma0;
    for _ in 0..=max_halvings {
        let params = StepParams { gamma, ..*base };
        let trace = run(w0.clone(), &params, model, reference, stop)?;
        if trace.status == RunStatus::Converged {
            return Ok(Some((gamma, trace)));
        }
        gamma *= 0.5;
    }
    Ok(None)
}

/// Least-squares slope and R² of log₁₀ d over the final `tail_frac` of the
/// records with d > 0. Returns `None` with fewer than two usable points.
pub fn log_slope_tail(records: &[TraceRecord], tail_frac: f64) -> Option<(f64, f64)> {
    let usable: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.d > 0.0 && r.d.is_finite())
        .map(|r| (r.tick as f64, r.d.log10()))
        .collect();
    let start = ((usable.len() as f64) * (1.0 - tail_frac)).floor() as usize;
    let tail = &usable[start.min(usable.len())..];
    if tail.len() < 2 {
        return None;
    }
    let n = tail.len() as f64;
    let mean_t = tail.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = tail.iter().map(|p| p.1).sum::<f64>() / n;
    let mut stt = 0.0;
    let mut sty = 0.0;
    let mut syy = 0.0;
    for &(t, y) in tail {
        stt += (t - mean_t) * (t - mean_t);
        sty += (t - mean_t) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if stt == 0.0 {
        return None;
    }
    let slope = sty / stt;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        (sty * sty) / (stt * syy)
    };
    Some((slope, r2))
}

/// Writes the trace as CSV. Floats use Rust's shortest round-trip decimal
/// form, so identical runs serialize to identical bytes.
pub fn write_trace_csv<W: Write>(trace: &Trace, out: &mut W) -> std::io::Result<()> {
    writeln!(
        out,
        "tick,d,primal_residual,lambda_consensus_err,gap_to_lambda_star,active_count,dropped_count"
    )?;
    for r in &trace.records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.tick,
            r.d,
            r.primal_residual,
            r.lambda_consensus_err,
            r.gap_to_lambda_star,
            r.active_count,
            r.dropped_count
        )?;
    }
    Ok(())
}

/// CSV trace to a file path.
pub fn write_trace_csv_file(trace: &Trace, path: &std::path::Path) -> std::io::Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trace_csv(trace, &mut file)
}
