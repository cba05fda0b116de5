//! Centralized ground truth for the constraint-coupled problem.
//!
//! Two routes to the unique saddle point (x*, λ*):
//! a closed-form KKT solve when every cost is quadratic, and a centralized
//! primal-dual iteration with exact global averages for general costs,
//!
//! ```text
//!   x_i⁺ = x_i − γ(∇f_i(x_i) + A_iᵀ·avg(λ))
//!   λ_i⁺ = λ_i + γ(κ(avg(λ) − λ_i) + (1/N)(Ax − b))
//! ```
//!
//! The distributed algorithm is judged against these answers, never against
//! itself.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{global_residual, ProblemError, ProblemInstance};

/// Norm threshold beyond which an explicit iteration is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("closed-form solve needs all-quadratic costs")]
    NotQuadratic,
    #[error("KKT system is singular; check strong convexity and row rank")]
    SingularKkt,
    #[error("iteration diverged at step {0}")]
    Diverged(usize),
    #[error("no convergence within {iters} iterations (residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// The saddle point of the Lagrangian, with its measured KKT residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "SaddlePointJson", into = "SaddlePointJson")]
pub struct SaddlePoint {
    pub x_star: DVector<f64>,
    pub lambda_star: DVector<f64>,
    pub kkt_residual: f64,
}

#[derive(Serialize, Deserialize)]
struct SaddlePointJson {
    x_star: Vec<f64>,
    lambda_star: Vec<f64>,
    kkt_residual: f64,
}

impl From<SaddlePoint> for SaddlePointJson {
    fn from(s: SaddlePoint) -> Self {
        SaddlePointJson {
            x_star: s.x_star.iter().copied().collect(),
            lambda_star: s.lambda_star.iter().copied().collect(),
            kkt_residual: s.kkt_residual,
        }
    }
}

impl From<SaddlePointJson> for SaddlePoint {
    fn from(json: SaddlePointJson) -> Self {
        SaddlePoint {
            x_star: DVector::from_vec(json.x_star),
            lambda_star: DVector::from_vec(json.lambda_star),
            kkt_residual: json.kkt_residual,
        }
    }
}

/// First-order optimality measure ‖∇f(x) + Aᵀλ̄‖ + ‖Ax − b‖.
pub fn saddle_residual(
    p: &ProblemInstance,
    x: &DVector<f64>,
    lambda_bar: &DVector<f64>,
) -> Result<f64, OracleError> {
    if lambda_bar.len() != p.constraint_dim() {
        return Err(OracleError::Problem(ProblemError::DimensionMismatch(
            format!(
                "multiplier has length {}, coupling dimension is {}",
                lambda_bar.len(),
                p.constraint_dim()
            ),
        )));
    }
    let mut stationarity = p.grad_total(x)?;
    for i in 0..p.n_agents() {
        let contribution = p.a_block(i).transpose() * lambda_bar;
        for (k, idx) in p.agent_range(i).enumerate() {
            stationarity[idx] += contribution[k];
        }
    }
    let feasibility = global_residual(p, x)?;
    Ok(stationarity.norm() + feasibility.norm())
}

/// Solves the linear KKT system
///
/// ```text
///   [ blockdiag(Q)  Aᵀ ] [x]   [−q]
///   [ A             0  ] [λ] = [ b]
/// ```
///
/// by dense LU with one step of iterative refinement.
pub fn solve_kkt_quadratic(p: &ProblemInstance) -> Result<SaddlePoint, OracleError> {
    let (h, q) = p.quadratic_parts().ok_or(OracleError::NotQuadratic)?;
    let n = p.total_primal_dim();
    let m = p.constraint_dim();
    let a = p.stacked_a();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(&h);
    k.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    k.view_mut((n, 0), (m, n)).copy_from(&a);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-&q));
    rhs.rows_mut(n, m).copy_from(p.b());

    let lu = k.clone().lu();
    let mut w = lu.solve(&rhs).ok_or(OracleError::SingularKkt)?;
    let refine = &rhs - &k * &w;
    if let Some(dw) = lu.solve(&refine) {
        w += dw;
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(OracleError::SingularKkt);
    }

    let x_star = DVector::from(w.rows(0, n));
    let lambda_star = DVector::from(w.rows(n, m));
    let kkt_residual = saddle_residual(p, &x_star, &lambda_star)?;
    Ok(SaddlePoint {
        x_star,
        lambda_star,
        kkt_residual,
    })
}

/// One snapshot of the centralized iteration: the stacked primal point and
/// every agent's multiplier copy.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedState {
    pub x: DVector<f64>,
    pub lambdas: Vec<DVector<f64>>,
}

impl CentralizedState {
    /// Mean of the multiplier copies.
    pub fn lambda_avg(&self) -> DVector<f64> {
        let m = self.lambdas[0].len();
        let sum = self
            .lambdas
            .iter()
            .fold(DVector::zeros(m), |acc, l| acc + l);
        sum / (self.lambdas.len() as f64)
    }

    /// Largest pairwise deviation of the multiplier copies from their mean.
    pub fn lambda_spread(&self) -> f64 {
        let avg = self.lambda_avg();
        self.lambdas
            .iter()
            .map(|l| (l - &avg).norm())
            .fold(0.0, f64::max)
    }
}

fn centralized_step(
    p: &ProblemInstance,
    state: &CentralizedState,
    gamma: f64,
    kappa: f64,
) -> Result<CentralizedState, ProblemError> {
    let n_agents = p.n_agents() as f64;
    let lambda_avg = state.lambda_avg();
    let residual_share = global_residual(p, &state.x)? / n_agents;
    let mut x_next = state.x.clone();
    let mut lambdas_next = Vec::with_capacity(state.lambdas.len());
    for i in 0..p.n_agents() {
        let range = p.agent_range(i);
        let xi = DVector::from(state.x.rows(range.start, range.len()));
        let step = p.cost(i).grad(&xi) + p.a_block(i).transpose() * &lambda_avg;
        x_next
            .rows_mut(range.start, range.len())
            .copy_from(&(&xi - gamma * step));
        let li = &state.lambdas[i];
        lambdas_next.push(li + gamma * (kappa * (&lambda_avg - li) + &residual_share));
    }
    Ok(CentralizedState {
        x: x_next,
        lambdas: lambdas_next,
    })
}

fn state_magnitude(state: &CentralizedState) -> f64 {
    let x_mag = state.x.abs().max();
    state
        .lambdas
        .iter()
        .map(|l| l.abs().max())
        .fold(x_mag, f64::max)
}

/// Runs the centralized iteration for `iters` steps and returns the full
/// trajectory, initial state included.
pub fn centralized_primal_dual(
    p: &ProblemInstance,
    gamma: f64,
    kappa: f64,
    iters: usize,
    x0: DVector<f64>,
    lambda0: Vec<DVector<f64>>,
) -> Result<Vec<CentralizedState>, OracleError> {
    if gamma <= 0.0 || kappa <= 0.0 {
        return Err(OracleError::Problem(ProblemError::BadParameter(format!(
            "steps must be positive, got gamma {gamma} kappa {kappa}"
        ))));
    }
    if lambda0.len() != p.n_agents() {
        return Err(OracleError::Problem(ProblemError::DimensionMismatch(
            format!(
                "{} multiplier copies for {} agents",
                lambda0.len(),
                p.n_agents()
            ),
        )));
    }
    let mut trajectory = Vec::with_capacity(iters + 1);
    trajectory.push(CentralizedState {
        x: x0,
        lambdas: lambda0,
    });
    for t in 0..iters {
        let next = centralized_step(p, trajectory.last().unwrap(), gamma, kappa)?;
        let mag = state_magnitude(&next);
        if !mag.is_finite() || mag > DIVERGENCE_LIMIT {
            return Err(OracleError::Diverged(t + 1));
        }
        trajectory.push(next);
    }
    Ok(trajectory)
}

/// Finds the saddle point for general costs by running the centralized
/// iteration from zero until the optimality measure and the multiplier
/// spread both drop below `tol`. Halves γ and restarts on divergence.
pub fn solve_saddle_point_pd(
    p: &ProblemInstance,
    kappa: f64,
    max_iters: usize,
    tol: f64,
) -> Result<SaddlePoint, OracleError> {
    let report = p.validate(None);
    let mut gamma = (1.0 / report.c_est.max(1.0)).min(1.0);
    let mut last_residual = f64::INFINITY;
    'attempt: for _ in 0..60 {
        let mut state = CentralizedState {
            x: DVector::zeros(p.total_primal_dim()),
            lambdas: vec![DVector::zeros(p.constraint_dim()); p.n_agents()],
        };
        let check_every = 50;
        for t in 0..max_iters {
            state = centralized_step(p, &state, gamma, kappa)?;
            let mag = state_magnitude(&state);
            if !mag.is_finite() || mag > DIVERGENCE_LIMIT {
                gamma *= 0.5;
                continue 'attempt;
            }
            if t % check_every == check_every - 1 {
                let lambda_avg = state.lambda_avg();
                let residual = saddle_residual(p, &state.x, &lambda_avg)?;
                last_residual = residual;
                if residual <= tol && state.lambda_spread() <= tol {
                    return Ok(SaddlePoint {
                        x_star: state.x,
                        lambda_star: lambda_avg,
                        kkt_residual: residual,
                    });
                }
            }
        }
        return Err(OracleError::NoConvergence {
            iters: max_iters,
            residual: last_residual,
        });
    }
    Err(OracleError::NoConvergence {
        iters: max_iters,
        residual: last_residual,
    })
}
