//! Aggregate form of the consensus dynamics and numerical certification of
//! the convergence analysis.
//!
//! Stacking the per-edge consensus slots in the canonical directed-edge
//! order turns the gossip into a linear system
//!
//! ```text
//!   z⁺ = T z + g(x, λ),   T = I − β(I + S − 2ρ·S·D·H·Dᵀ),
//!   g(x, λ) = 2βρ·S·D·H·u,   u = col(A_i x_i − b_i, λ_i)
//! ```
//!
//! where S swaps the (i,j) slot with the (j,i) slot, D replicates each
//! agent's 2m-block once per incident edge, and H holds the per-agent proxy
//! scalings 1/(1+ρ·deg_i).
//!
//! T's eigenvalue-1 eigenspace is exactly ker(Dᵀ) ∩ ker(I+S): antisymmetric
//! edge flows with zero divergence, invisible to the proxies. Splitting it
//! off with an orthonormal basis leaves a strictly contracting block T⊥, and
//! at the contraction's fixed point every agent's proxy equals the global
//! average pair ((1/N)(Ax−b), avg λ). Two quadratic certificates are
//! computed, not assumed: a matrix inequality for the centralized field and
//! a discrete Lyapunov solution for T⊥.

use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::graph::Graph;
use crate::network::StepParams;
use crate::problem::{ProblemError, ProblemInstance};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(
        "eigenvalue {re}{im:+}i (modulus {modulus:.6}) is neither at 1 nor safely inside the unit circle (tolerance {tol:.1e})"
    )]
    SpectralAmbiguity {
        re: f64,
        im: f64,
        modulus: f64,
        tol: f64,
    },
    #[error("unit eigenspace is defective: {algebraic} eigenvalues at 1, null-space dimension {geometric}")]
    DefectiveUnitSpace { algebraic: usize, geometric: usize },
    #[error("fixed-point solve failed; the contraction block is effectively singular at 1")]
    SingularSolve,
    #[error("eigenvalue iteration stalled on a {dim}x{dim} operator at every tested threshold")]
    EigenIterationStalled { dim: usize },
    #[error("contraction block has spectral radius {0}, not Schur")]
    NotSchur(f64),
    #[error("no weight in the grid certifies the decrease inequality")]
    NoCertifiedP,
    #[error("certification needs all-quadratic costs")]
    NotQuadratic,
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// The stacked gossip operators for one topology and one (ρ, β) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateMatrices {
    /// S: permutation exchanging the (i,j) slot with the (j,i) slot.
    pub swap: DMatrix<f64>,
    /// D: block row for edge (i,j) holds I_{2m} in agent i's column block.
    pub replicator: DMatrix<f64>,
    /// H: block i equals (1/(1+ρ·deg_i))·I_{2m}.
    pub scaling: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub rho: f64,
    pub beta: f64,
    pub m: usize,
    pub n_agents: usize,
    pub directed_edges: usize,
}

impl AggregateMatrices {
    /// Dimension of the stacked consensus vector, 2m·(directed edges).
    pub fn z_dim(&self) -> usize {
        2 * self.m * self.directed_edges
    }

    /// Dimension of the stacked local quantities, 2m·N.
    pub fn u_dim(&self) -> usize {
        2 * self.m * self.n_agents
    }

    /// Drive term g(x, λ) = 2βρ·S·D·H·u.
    pub fn drive(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.swap * (&self.replicator * (&self.scaling * u)) * (2.0 * self.beta * self.rho)
    }

    /// All agents' proxies stacked: H(u + Dᵀz).
    pub fn proxy_stack(&self, u: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        &self.scaling * (u + self.replicator.transpose() * z)
    }
}

/// Builds the stacked operators for a graph with 2m-wide slots.
pub fn build_aggregate(g: &Graph, m: usize, rho: f64, beta: f64) -> AggregateMatrices {
    let block = 2 * m;
    let edges = g.directed_edges();
    let z_dim = block * edges.len();
    let u_dim = block * g.node_count();

    let mut swap = DMatrix::zeros(z_dim, z_dim);
    let mut replicator = DMatrix::zeros(z_dim, u_dim);
    for (e, &(i, j)) in edges.iter().enumerate() {
        let partner = g
            .directed_edge_index(j, i)
            .expect("reverse edge exists for every directed edge");
        for k in 0..block {
            swap[(e * block + k, partner * block + k)] = 1.0;
            replicator[(e * block + k, i * block + k)] = 1.0;
        }
    }
    let mut scaling = DMatrix::zeros(u_dim, u_dim);
    for i in 0..g.node_count() {
        let deg = g.degree(i).expect("node within graph") as f64;
        let factor = 1.0 / (1.0 + rho * deg);
        for k in 0..block {
            scaling[(i * block + k, i * block + k)] = factor;
        }
    }
    let sdh = &swap * &replicator * &scaling;
    let t = DMatrix::identity(z_dim, z_dim) * (1.0 - beta) - &swap * beta
        + &sdh * replicator.transpose() * (2.0 * beta * rho);
    AggregateMatrices {
        swap,
        replicator,
        scaling,
        t,
        rho,
        beta,
        m,
        n_agents: g.node_count(),
        directed_edges: edges.len(),
    }
}

/// Stacks the per-agent pairs col(A_i x_i − b_i, λ_i) into one 2Nm vector.
pub fn stack_local_quantities(
    p: &ProblemInstance,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<DVector<f64>, AnalysisError> {
    let m = p.constraint_dim();
    check_stacked_dims(p, x, lambda)?;
    let mut u = DVector::zeros(2 * m * p.n_agents());
    for i in 0..p.n_agents() {
        let xi = x.rows(p.agent_range(i).start, p.local_dim(i));
        let residual = p.a_block(i) * xi - p.b_allot(i);
        u.rows_mut(2 * m * i, m).copy_from(&residual);
        u.rows_mut(2 * m * i + m, m)
            .copy_from(&lambda.rows(m * i, m));
    }
    Ok(u)
}

fn check_stacked_dims(
    p: &ProblemInstance,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<(), AnalysisError> {
    if x.len() != p.total_primal_dim() {
        return Err(AnalysisError::DimensionMismatch(format!(
            "stacked primal point has length {}, instance has {}",
            x.len(),
            p.total_primal_dim()
        )));
    }
    if lambda.len() != p.constraint_dim() * p.n_agents() {
        return Err(AnalysisError::DimensionMismatch(format!(
            "stacked multipliers have length {}, instance needs {}",
            lambda.len(),
            p.constraint_dim() * p.n_agents()
        )));
    }
    Ok(())
}

/// The global average pair ((1/N)Σ(A_i x_i − b_i), (1/N)Σλ_i) that the
/// proxies are built to track.
pub fn alpha(
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    p: &ProblemInstance,
) -> Result<DVector<f64>, AnalysisError> {
    let m = p.constraint_dim();
    let u = stack_local_quantities(p, x, lambda)?;
    let mut avg = DVector::zeros(2 * m);
    for i in 0..p.n_agents() {
        avg += u.rows(2 * m * i, 2 * m);
    }
    Ok(avg / (p.n_agents() as f64))
}

/// Stacked (x, λ, z) state of the aggregate dynamics.
pub type StackedState = (DVector<f64>, DVector<f64>, DVector<f64>);

/// One step of the stacked dynamics; must agree with the per-agent harness.
pub fn aggregate_step(
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    z: &DVector<f64>,
    matrices: &AggregateMatrices,
    p: &ProblemInstance,
    params: &StepParams,
) -> Result<StackedState, AnalysisError> {
    let m = p.constraint_dim();
    if z.len() != matrices.z_dim() {
        return Err(AnalysisError::DimensionMismatch(format!(
            "stacked consensus vector has length {}, operators expect {}",
            z.len(),
            matrices.z_dim()
        )));
    }
    let u = stack_local_quantities(p, x, lambda)?;
    let proxies = matrices.proxy_stack(&u, z);

    let mut x_next = x.clone();
    let mut lambda_next = lambda.clone();
    for i in 0..p.n_agents() {
        let s_x = DVector::from(proxies.rows(2 * m * i, m));
        let s_lambda = DVector::from(proxies.rows(2 * m * i + m, m));
        let xi = DVector::from(x.rows(p.agent_range(i).start, p.local_dim(i)));
        let li = DVector::from(lambda.rows(m * i, m));
        let grad = p.cost(i).grad(&xi);
        let xi_next = &xi - (grad + p.a_block(i).transpose() * &s_lambda) * params.gamma;
        let li_next = &li + (&s_lambda - &li) * (params.kappa * params.gamma) + &s_x * params.gamma;
        x_next
            .rows_mut(p.agent_range(i).start, p.local_dim(i))
            .copy_from(&xi_next);
        lambda_next.rows_mut(m * i, m).copy_from(&li_next);
    }
    let z_next = &matrices.t * z + matrices.drive(&u);
    Ok((x_next, lambda_next, z_next))
}

/// Full complex spectrum via a capped Francis iteration; empty input yields
/// an empty spectrum (the decomposition panics on 0×0 matrices).
///
/// The machine-precision iteration with no step cap can cycle forever on
/// gossip operators with tight eigenvalue clusters, so the off-diagonal
/// threshold is relaxed stepwise and each attempt is bounded.
pub fn spectrum(t: &DMatrix<f64>) -> Result<Vec<Complex<f64>>, AnalysisError> {
    if t.nrows() == 0 {
        return Ok(Vec::new());
    }
    for eps in [1e-14, 1e-12, 1e-10] {
        if let Some(schur) = t.clone().try_schur(eps, 100_000) {
            return Ok(schur.complex_eigenvalues().iter().copied().collect());
        }
    }
    Err(AnalysisError::EigenIterationStalled { dim: t.nrows() })
}

/// Spectral radius by scaled repeated squaring: 48 doublings of the
/// normalized operator evaluate ρ = lim ‖A^k‖^(1/k) at k = 2^48, where the
/// polynomial slack in the limit is below machine precision. Never stalls,
/// and approaches ρ from above, so strict contraction checks stay safe.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let norm0 = a.norm();
    if norm0 == 0.0 {
        return 0.0;
    }
    if !norm0.is_finite() {
        return f64::INFINITY;
    }
    let mut log_norm = norm0.ln();
    let mut d = a / norm0;
    for _ in 0..48 {
        let sq = &d * &d;
        let n = sq.norm();
        if n == 0.0 {
            // Nilpotent to machine precision.
            return 0.0;
        }
        log_norm = 2.0 * log_norm + n.ln();
        d = sq / n;
    }
    (log_norm / f64::powi(2.0, 48)).exp()
}

/// Orthogonal separation of the gossip operator into its unit eigenspace
/// and a strictly contracting complement.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSplit {
    /// B: orthonormal basis of the eigenvalue-1 eigenspace, invariant from
    /// both sides (TB = B and TᵀB = B).
    pub unit_basis: DMatrix<f64>,
    /// M: orthonormal complement, MᵀB = 0, MᵀM = I.
    pub complement_basis: DMatrix<f64>,
    /// T⊥ = MᵀTM.
    pub t_perp: DMatrix<f64>,
    /// Multiplicity of eigenvalue 1.
    pub unit_dim: usize,
    /// Dimension of the contracting block.
    pub perp_dim: usize,
    /// Measured spectral radius of T⊥.
    pub spectral_radius: f64,
}

/// Classifies T's spectrum and builds the orthogonal split. Eigenvalues
/// with |λ−1| ≤ tol_unit count as unitary; anything else must have modulus
/// at most 1 − tol_unit or the classification is refused.
pub fn split_spectrum(
    matrices: &AggregateMatrices,
    tol_unit: f64,
) -> Result<SpectralSplit, AnalysisError> {
    let t = &matrices.t;
    let dim = t.nrows();
    if dim == 0 {
        return Ok(SpectralSplit {
            unit_basis: DMatrix::zeros(0, 0),
            complement_basis: DMatrix::zeros(0, 0),
            t_perp: DMatrix::zeros(0, 0),
            unit_dim: 0,
            perp_dim: 0,
            spectral_radius: 0.0,
        });
    }

    let eigenvalues = spectrum(t)?;
    let mut algebraic = 0;
    for ev in &eigenvalues {
        let dist_to_one = (ev - Complex::new(1.0, 0.0)).norm();
        let modulus = ev.norm();
        if dist_to_one <= tol_unit {
            algebraic += 1;
        } else if modulus > 1.0 - tol_unit {
            return Err(AnalysisError::SpectralAmbiguity {
                re: ev.re,
                im: ev.im,
                modulus,
                tol: tol_unit,
            });
        }
    }

    // Null space of T − I via SVD; the basis is orthonormal by construction
    // and simultaneously spans the left eigenspace, so [B M] exactly
    // block-diagonalizes T.
    let shifted = t - DMatrix::identity(dim, dim);
    let svd = shifted.svd(false, true);
    let v_t = svd.v_t.expect("SVD with right vectors requested");
    let null_tol = tol_unit * svd.singular_values.max().max(1.0);
    let geometric = svd
        .singular_values
        .iter()
        .filter(|&&s| s <= null_tol)
        .count();
    if geometric != algebraic {
        return Err(AnalysisError::DefectiveUnitSpace {
            algebraic,
            geometric,
        });
    }
    // Singular values are descending, so null vectors are the trailing rows.
    let rank = dim - geometric;
    let unit_basis = v_t.rows(rank, geometric).transpose();
    let complement_basis = v_t.rows(0, rank).transpose();

    let t_perp = complement_basis.transpose() * t * &complement_basis;
    let spectral_radius = spectral_radius(&t_perp);
    Ok(SpectralSplit {
        unit_basis,
        complement_basis,
        t_perp,
        unit_dim: geometric,
        perp_dim: rank,
        spectral_radius,
    })
}

/// The contraction's fixed point for frozen (x, λ): solves
/// (I − T⊥)·z⊥ = Mᵀg(x, λ).
pub fn z_perp_eq(
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    split: &SpectralSplit,
    matrices: &AggregateMatrices,
    p: &ProblemInstance,
) -> Result<DVector<f64>, AnalysisError> {
    if split.perp_dim == 0 {
        return Ok(DVector::zeros(0));
    }
    let u = stack_local_quantities(p, x, lambda)?;
    let g_perp = split.complement_basis.transpose() * matrices.drive(&u);
    let system = DMatrix::identity(split.perp_dim, split.perp_dim) - &split.t_perp;
    system
        .lu()
        .solve(&g_perp)
        .filter(|w| w.iter().all(|v| v.is_finite()))
        .ok_or(AnalysisError::SingularSolve)
}

/// How far the proxies at the consensus fixed point are from the ideal
/// ‖proxies(z^eq) − 1⊗α(x, λ)‖; exact tracking makes this zero.
pub fn check_reconstruction(
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    split: &SpectralSplit,
    matrices: &AggregateMatrices,
    p: &ProblemInstance,
) -> Result<f64, AnalysisError> {
    let z_eq = &split.complement_basis * z_perp_eq(x, lambda, split, matrices, p)?;
    let u = stack_local_quantities(p, x, lambda)?;
    let proxies = matrices.proxy_stack(&u, &z_eq);
    let target = alpha(x, lambda, p)?;
    let mut err_sq = 0.0;
    let block = 2 * matrices.m;
    for i in 0..matrices.n_agents {
        err_sq += (proxies.rows(block * i, block) - &target).norm_squared();
    }
    Ok(err_sq.sqrt())
}

/// Certificate that the centralized field admits the quadratic decrease
/// W(χ̃) = χ̃ᵀPχ̃ with dW ≤ −margin·‖χ̃‖².
#[derive(Debug, Clone, Serialize)]
pub struct DecreaseCertificate {
    /// Certified diagonal weight.
    pub p: f64,
    /// −λ_max(GᵀP + PG), positive when certified.
    pub margin: f64,
    /// λ_min(P), positive when certified.
    pub lambda_min_p: f64,
    /// The analytical bound 2·min{pμ, a, pκ}, reported for comparison only.
    pub q_reported: f64,
    /// λ_min((1/N)AAᵀ).
    pub a: f64,
    pub mu: f64,
    pub kappa: f64,
    /// Weights that were tried and failed before the certified one.
    pub rejected: Vec<f64>,
    #[serde(skip)]
    pub p_matrix: DMatrix<f64>,
    #[serde(skip)]
    pub g_matrix: DMatrix<f64>,
}

/// Decrease required of λ_max(GᵀP + PG) before a weight counts as certified.
pub const DECREASE_MARGIN_FLOOR: f64 = 1e-8;

/// Default weight grid p₀·2^k, k = 0..=20, p₀ = ‖AAᵀ‖ + 1.
pub fn default_p_grid(p: &ProblemInstance) -> Vec<f64> {
    let a = p.stacked_a();
    let sigma_max = a.svd(false, false).singular_values.max();
    let p0 = sigma_max * sigma_max + 1.0;
    (0..=20).map(|k| p0 * f64::powi(2.0, k)).collect()
}

/// Builds the linearized centralized field
///
/// ```text
///   G = [ −𝓗        −E   ]        E = (1/N)·Aᵀ·(1ᵀ⊗I_m)
///       [  Eᵀ      −κJ   ]        J = I − (1/N)·(1⊗I_m)(1ᵀ⊗I_m)
/// ```
///
/// and scans the weight grid for the first P = [[pI, E], [Eᵀ, pI]] that is
/// positive definite with λ_max(GᵀP + PG) ≤ −margin floor.
pub fn certify_centralized_decrease(
    p_instance: &ProblemInstance,
    kappa: f64,
    p_grid: &[f64],
) -> Result<DecreaseCertificate, AnalysisError> {
    let (hessian, _) = p_instance
        .quadratic_parts()
        .ok_or(AnalysisError::NotQuadratic)?;
    let n = p_instance.total_primal_dim();
    let m = p_instance.constraint_dim();
    let n_agents = p_instance.n_agents();
    let nm = n_agents * m;
    let a_mat = p_instance.stacked_a();

    // 1 ⊗ I_m, the consensus direction of the multiplier copies.
    let mut ones = DMatrix::zeros(nm, m);
    for i in 0..n_agents {
        for k in 0..m {
            ones[(i * m + k, k)] = 1.0;
        }
    }
    let e_mat = a_mat.transpose() * ones.transpose() / (n_agents as f64);
    let j_mat = DMatrix::identity(nm, nm) - &ones * ones.transpose() / (n_agents as f64);

    let dim = n + nm;
    let mut g = DMatrix::zeros(dim, dim);
    g.view_mut((0, 0), (n, n)).copy_from(&(-&hessian));
    g.view_mut((0, n), (n, nm)).copy_from(&(-&e_mat));
    g.view_mut((n, 0), (nm, n)).copy_from(&e_mat.transpose());
    g.view_mut((n, n), (nm, nm)).copy_from(&(&j_mat * (-kappa)));

    let aat = &a_mat * a_mat.transpose() / (n_agents as f64);
    let a_min = aat.symmetric_eigen().eigenvalues.min();
    let mu = p_instance.validate(None).mu_est;

    let mut rejected = Vec::new();
    for &p in p_grid {
        let mut p_mat = DMatrix::identity(dim, dim) * p;
        p_mat.view_mut((0, n), (n, nm)).copy_from(&e_mat);
        p_mat
            .view_mut((n, 0), (nm, n))
            .copy_from(&e_mat.transpose());

        let lambda_min_p = p_mat.clone().symmetric_eigen().eigenvalues.min();
        if lambda_min_p <= 0.0 {
            rejected.push(p);
            continue;
        }
        let decrease = g.transpose() * &p_mat + &p_mat * &g;
        let lambda_max = decrease.symmetric_eigen().eigenvalues.max();
        if lambda_max <= -DECREASE_MARGIN_FLOOR {
            let q_reported = 2.0 * (p * mu).min(a_min).min(p * kappa);
            return Ok(DecreaseCertificate {
                p,
                margin: -lambda_max,
                lambda_min_p,
                q_reported,
                a: a_min,
                mu,
                kappa,
                rejected,
                p_matrix: p_mat,
                g_matrix: g,
            });
        }
        rejected.push(p);
    }
    Err(AnalysisError::NoCertifiedP)
}

/// Certificate that U(z̃) = z̃ᵀQz̃ strictly decreases along the contraction:
/// b₁‖z̃‖² ≤ U ≤ b₂‖z̃‖² and U(T⊥z̃) − U(z̃) ≤ −b₃‖z̃‖².
#[derive(Debug, Clone, Serialize)]
pub struct ContractionCertificate {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    /// ‖T⊥ᵀQT⊥ − Q + I‖_max.
    pub residual: f64,
    pub spectral_radius: f64,
    pub perp_dim: usize,
    #[serde(skip)]
    pub q_matrix: DMatrix<f64>,
}

/// Solves T⊥ᵀQT⊥ − Q = −I by doubling: Q ← Q + AᵀQA, A ← A², which sums the
/// series Σ (T⊥ᵀ)^k T⊥^k in O(log) multiplies.
pub fn certify_contraction(split: &SpectralSplit) -> Result<ContractionCertificate, AnalysisError> {
    let dim = split.perp_dim;
    if dim == 0 {
        return Ok(ContractionCertificate {
            b1: 1.0,
            b2: 1.0,
            b3: 1.0,
            residual: 0.0,
            spectral_radius: 0.0,
            perp_dim: 0,
            q_matrix: DMatrix::zeros(0, 0),
        });
    }
    if split.spectral_radius >= 1.0 {
        return Err(AnalysisError::NotSchur(split.spectral_radius));
    }
    let mut q = DMatrix::identity(dim, dim);
    let mut a = split.t_perp.clone();
    for _ in 0..100 {
        q += a.transpose() * &q * &a;
        q = (&q + q.transpose()) * 0.5;
        a = &a * &a;
        let a_norm = a.norm();
        if !a_norm.is_finite() {
            return Err(AnalysisError::NotSchur(split.spectral_radius));
        }
        if a_norm * a_norm * q.norm() < 1e-18 {
            break;
        }
    }
    let residual_matrix =
        split.t_perp.transpose() * &q * &split.t_perp - &q + DMatrix::identity(dim, dim);
    let residual = residual_matrix.abs().max();
    let eigen = q.clone().symmetric_eigen().eigenvalues;
    Ok(ContractionCertificate {
        b1: eigen.min(),
        b2: eigen.max(),
        b3: 1.0,
        residual,
        spectral_radius: split.spectral_radius,
        perp_dim: dim,
        q_matrix: q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{step_synchronous, WorldState};
    use crate::problem::{random_quadratic_instance, LocalCost};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn params() -> StepParams {
        StepParams {
            gamma: 0.05,
            kappa: 1.0,
            rho: 1.0,
            beta: 0.5,
        }
    }

    fn random_point(p: &ProblemInstance, seed: u64) -> (DVector<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DVector::from_fn(p.total_primal_dim(), |_, _| rng.random_range(-2.0..2.0));
        let lambda = DVector::from_fn(p.constraint_dim() * p.n_agents(), |_, _| {
            rng.random_range(-2.0..2.0)
        });
        (x, lambda)
    }

    #[test]
    fn pair_graph_operators_collapse() {
        let g = Graph::new(2, &[(0, 1)]).unwrap();
        let agg = build_aggregate(&g, 1, 1.0, 0.5);
        assert_eq!(agg.replicator, DMatrix::identity(4, 4));
        assert_eq!(agg.scaling, DMatrix::identity(4, 4) * 0.5);
        assert!((&agg.t - DMatrix::identity(4, 4) * 0.5).abs().max() < 1e-15);
    }

    #[test]
    fn swap_is_an_involution() {
        let g = Graph::cycle(3).unwrap();
        let agg = build_aggregate(&g, 2, 0.7, 0.4);
        let square = &agg.swap * &agg.swap;
        assert_eq!(square, DMatrix::identity(agg.z_dim(), agg.z_dim()));
        for row in 0..agg.z_dim() {
            let sum: f64 = agg.swap.row(row).iter().sum();
            assert_eq!(sum, 1.0);
        }
    }

    #[test]
    fn replicator_columns_count_degrees() {
        let g = Graph::path(4).unwrap();
        let m = 1;
        let agg = build_aggregate(&g, m, 1.0, 0.5);
        for i in 0..4 {
            let deg = g.degree(i).unwrap() as f64;
            for k in 0..2 * m {
                let col_sum: f64 = agg.replicator.column(i * 2 * m + k).iter().sum();
                assert_eq!(col_sum, deg);
            }
        }
    }

    #[test]
    fn aggregate_matches_per_agent_harness() {
        let p = Arc::new(random_quadratic_instance(4, 2, 2, 0.6, 21).unwrap());
        let agg = build_aggregate(p.graph(), p.constraint_dim(), 1.0, 0.5);
        let mut world = WorldState::zero_init(Arc::clone(&p));
        let (x0, l0) = random_point(&p, 77);
        for i in 0..4 {
            let r = p.agent_range(i);
            world.agents[i].x = DVector::from(x0.rows(r.start, r.len()));
            world.agents[i].lambda = DVector::from(l0.rows(2 * i, 2));
        }
        let z0 = DVector::from_fn(agg.z_dim(), |k, _| (k as f64) * 0.01 - 0.3);
        world.set_stacked_z(&z0).unwrap();

        let (mut x, mut lambda, mut z) = (x0, l0, z0);
        for _ in 0..100 {
            world = step_synchronous(&world, &params()).unwrap();
            let (xn, ln, zn) = aggregate_step(&x, &lambda, &z, &agg, &p, &params()).unwrap();
            x = xn;
            lambda = ln;
            z = zn;
            assert!((world.stacked_x() - &x).abs().max() < 1e-12);
            assert!((world.stacked_lambda() - &lambda).abs().max() < 1e-12);
            assert!((world.stacked_z() - &z).abs().max() < 1e-12);
        }
    }

    #[test]
    fn zero_state_is_preserved_without_coupling() {
        let g = Graph::cycle(3).unwrap();
        let cost =
            || LocalCost::quadratic(DMatrix::identity(1, 1), DVector::zeros(1), 0.0).unwrap();
        let p = ProblemInstance::new(
            g.clone(),
            vec![cost(), cost(), cost()],
            vec![DMatrix::identity(1, 1); 3],
            DVector::zeros(1),
        )
        .unwrap();
        let agg = build_aggregate(&g, 1, 1.0, 0.5);
        let z = DVector::zeros(agg.z_dim());
        let x = DVector::zeros(3);
        let lambda = DVector::zeros(3);
        let (_, _, z_next) = aggregate_step(&x, &lambda, &z, &agg, &p, &params()).unwrap();
        assert_eq!(z_next, DVector::zeros(agg.z_dim()));
    }

    #[test]
    fn pair_graph_has_no_unit_modes() {
        let g = Graph::new(2, &[(0, 1)]).unwrap();
        let agg = build_aggregate(&g, 1, 1.0, 0.5);
        let split = split_spectrum(&agg, 1e-8).unwrap();
        assert_eq!(split.unit_dim, 0);
        assert_eq!(split.perp_dim, 4);
        assert!((split.spectral_radius - 0.5).abs() < 1e-12);
        let mtm = split.complement_basis.transpose() * &split.complement_basis;
        assert!((mtm - DMatrix::identity(4, 4)).abs().max() <= 1e-10);
    }

    #[test]
    fn unit_dimension_counts_independent_cycles() {
        // The unit eigenspace is the antisymmetric zero-divergence edge
        // space, of dimension 2m(|E| − N + 1).
        for (graph, m) in [
            (Graph::cycle(3).unwrap(), 1),
            (Graph::cycle(4).unwrap(), 2),
            (Graph::path(4).unwrap(), 1),
            (Graph::random_connected(6, 0.5, 9).unwrap(), 1),
        ] {
            let agg = build_aggregate(&graph, m, 1.0, 0.5);
            let split = split_spectrum(&agg, 1e-8).unwrap();
            let cycles = graph.edges().len() + 1 - graph.node_count();
            assert_eq!(split.unit_dim, 2 * m * cycles, "graph {:?}", graph.edges());
            assert!(split.spectral_radius < 1.0 - 1e-3);
            // The split is exact: BᵀTM = 0 and MᵀTB = 0.
            let cross = split.unit_basis.transpose() * &agg.t * &split.complement_basis;
            if cross.nrows() > 0 {
                assert!(cross.abs().max() <= 1e-10);
                let back = split.complement_basis.transpose() * &agg.t * &split.unit_basis;
                assert!(back.abs().max() <= 1e-10);
                let tb = &agg.t * &split.unit_basis;
                assert!((tb - &split.unit_basis).abs().max() <= 1e-10);
            }
        }
    }

    #[test]
    fn all_eigenvalues_stay_in_the_closed_disk() {
        for seed in 0..5 {
            let g = Graph::random_connected(5, 0.5, seed).unwrap();
            let agg = build_aggregate(&g, 1, 1.0, 0.5);
            let max_modulus = spectrum(&agg.t)
                .unwrap()
                .iter()
                .map(|ev| ev.norm())
                .fold(0.0, f64::max);
            assert!(max_modulus <= 1.0 + 1e-10, "modulus {max_modulus}");
        }
    }

    #[test]
    fn fixed_point_solves_defining_equation() {
        let p = random_quadratic_instance(4, 2, 2, 0.6, 33).unwrap();
        let agg = build_aggregate(p.graph(), 2, 1.0, 0.5);
        let split = split_spectrum(&agg, 1e-8).unwrap();
        let (x, lambda) = random_point(&p, 5);
        let w = z_perp_eq(&x, &lambda, &split, &agg, &p).unwrap();
        let u = stack_local_quantities(&p, &x, &lambda).unwrap();
        let g_perp = split.complement_basis.transpose() * agg.drive(&u);
        let residual = (&split.t_perp * &w + g_perp - &w).abs().max();
        assert!(residual <= 1e-10, "residual {residual}");

        let zero = z_perp_eq(
            &DVector::zeros(p.total_primal_dim()),
            &DVector::zeros(8),
            &split,
            &agg,
            &p,
        )
        .unwrap();
        // b ≠ 0 allotments still drive the slots, so only check finiteness
        // and the defining equation; with b = 0 the drive vanishes.
        assert!(zero.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_drive_has_zero_fixed_point() {
        let g = Graph::cycle(3).unwrap();
        let cost =
            || LocalCost::quadratic(DMatrix::identity(1, 1), DVector::zeros(1), 0.0).unwrap();
        let p = ProblemInstance::new(
            g.clone(),
            vec![cost(), cost(), cost()],
            vec![DMatrix::identity(1, 1); 3],
            DVector::zeros(1),
        )
        .unwrap();
        let agg = build_aggregate(&g, 1, 1.0, 0.5);
        let split = split_spectrum(&agg, 1e-8).unwrap();
        let w = z_perp_eq(&DVector::zeros(3), &DVector::zeros(3), &split, &agg, &p).unwrap();
        assert!(w.abs().max() == 0.0);
    }

    #[test]
    fn frozen_gossip_settles_on_the_fixed_point() {
        // Run the real per-agent gossip with frozen (x, λ) from z = 0; the
        // stacked slots must approach M·z⊥^eq, whose coordinates are z⊥^eq.
        let p = Arc::new(random_quadratic_instance(3, 2, 2, 0.7, 8).unwrap());
        let agg = build_aggregate(p.graph(), 2, 1.0, 0.5);
        let split = split_spectrum(&agg, 1e-8).unwrap();
        let (x, lambda) = random_point(&p, 14);

        let mut world = WorldState::zero_init(Arc::clone(&p));
        for i in 0..3 {
            let r = p.agent_range(i);
            world.agents[i].x = DVector::from(x.rows(r.start, r.len()));
            world.agents[i].lambda = DVector::from(lambda.rows(2 * i, 2));
        }
        for tick in 0..2000 {
            let proxies: Vec<_> = world
                .agents
                .iter()
                .map(|a| crate::agent::compute_proxy(a, &p, 1.0))
                .collect();
            let mut messages = Vec::new();
            for (i, a) in world.agents.iter().enumerate() {
                for &j in a.z.keys() {
                    messages
                        .push(crate::agent::make_message(a, &proxies[i], 1.0, j, tick).unwrap());
                }
            }
            for msg in &messages {
                world.agents[msg.to] =
                    crate::agent::receive(&world.agents[msg.to], msg, 0.5).unwrap();
            }
        }
        let w_eq = z_perp_eq(&x, &lambda, &split, &agg, &p).unwrap();
        let coords = split.complement_basis.transpose() * world.stacked_z();
        assert!((coords - &w_eq).abs().max() <= 1e-8);
        let full = &split.complement_basis * w_eq;
        assert!((world.stacked_z() - full).abs().max() <= 1e-8);
    }

    #[test]
    fn equilibrium_state_is_a_fixed_point_of_the_full_dynamics() {
        let p = random_quadratic_instance(4, 2, 2, 0.6, 41).unwrap();
        let sp = crate::oracle::solve_kkt_quadratic(&p).unwrap();
        let agg = build_aggregate(p.graph(), 2, 1.0, 0.5);
        let split = split_spectrum(&agg, 1e-8).unwrap();
        let mut lambda = DVector::zeros(2 * 4);
        for i in 0..4 {
            lambda.rows_mut(2 * i, 2).copy_from(&sp.lambda_star);
        }
        let w = z_perp_eq(&sp.x_star, &lambda, &split, &agg, &p).unwrap();
        let z = &split.complement_basis * w;
        let (x_next, lambda_next, z_next) =
            aggregate_step(&sp.x_star, &lambda, &z, &agg, &p, &params()).unwrap();
        assert!((x_next - &sp.x_star).abs().max() <= 1e-12);
        assert!((lambda_next - &lambda).abs().max() <= 1e-12);
        assert!((z_next - &z).abs().max() <= 1e-12);
    }

    #[test]
    fn reconstruction_is_exact_at_the_fixed_point() {
        for (graph, seed) in [
            (Graph::path(3).unwrap(), 1u64),
            (Graph::cycle(4).unwrap(), 2),
            (Graph::random_connected(5, 0.5, 3).unwrap(), 3),
        ] {
            let n = graph.node_count();
            let cost =
                || LocalCost::quadratic(DMatrix::identity(2, 2), DVector::zeros(2), 0.0).unwrap();
            let p = ProblemInstance::new(
                graph.clone(),
                (0..n).map(|_| cost()).collect(),
                vec![DMatrix::identity(2, 2); n],
                DVector::from_vec(vec![0.4, -1.1]),
            )
            .unwrap();
            let agg = build_aggregate(&graph, 2, 1.0, 0.5);
            let split = split_spectrum(&agg, 1e-8).unwrap();
            for k in 0..10 {
                let (x, lambda) = random_point(&p, seed * 100 + k);
                let err = check_reconstruction(&x, &lambda, &split, &agg, &p).unwrap();
                assert!(err <= 1e-9, "error {err}");
            }
        }
    }

    #[test]
    fn consensual_input_needs_no_correction() {
        let p = random_quadratic_instance(3, 2, 2, 0.7, 50).unwrap();
        let sp = crate::oracle::solve_kkt_quadratic(&p).unwrap();
        let mut lambda = DVector::zeros(6);
        for i in 0..3 {
            lambda.rows_mut(2 * i, 2).copy_from(&sp.lambda_star);
        }
        let avg = alpha(&sp.x_star, &lambda, &p).unwrap();
        assert!(avg.rows(0, 2).abs().max() <= 1e-10);
        assert!(
            (DVector::from(avg.rows(2, 2)) - &sp.lambda_star)
                .abs()
                .max()
                <= 1e-12
        );
    }

    #[test]
    fn lone_agent_average_is_the_local_quantity() {
        let p = random_quadratic_instance(1, 2, 1, 0.5, 4).unwrap();
        let (x, lambda) = random_point(&p, 9);
        let avg = alpha(&x, &lambda, &p).unwrap();
        let local = p.a_block(0) * &x - p.b_allot(0);
        assert!((DVector::from(avg.rows(0, 1)) - local).abs().max() <= 1e-14);
        assert!((DVector::from(avg.rows(1, 1)) - lambda).abs().max() <= 1e-14);
    }

    #[test]
    fn certificate_exists_for_the_scalar_instance() {
        let g = Graph::new(1, &[]).unwrap();
        let cost = LocalCost::quadratic(DMatrix::identity(1, 1), DVector::zeros(1), 0.0).unwrap();
        let p = ProblemInstance::new(
            g,
            vec![cost],
            vec![DMatrix::identity(1, 1)],
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let grid = default_p_grid(&p);
        assert_eq!(grid[0], 2.0);
        let cert = certify_centralized_decrease(&p, 1.0, &grid).unwrap();
        assert_eq!(cert.p, 2.0);
        assert!((cert.margin - 1.0).abs() < 1e-9);
        assert!(cert.lambda_min_p > 0.0);
        // G for this instance is [[−1, −1], [1, 0]].
        assert_eq!(cert.g_matrix[(0, 0)], -1.0);
        assert_eq!(cert.g_matrix[(0, 1)], -1.0);
        assert_eq!(cert.g_matrix[(1, 0)], 1.0);
        assert_eq!(cert.g_matrix[(1, 1)], 0.0);

        // Below the Schur threshold the weight matrix is not PD.
        let err = certify_centralized_decrease(&p, 1.0, &[0.5, 1.0]);
        assert!(matches!(err, Err(AnalysisError::NoCertifiedP)));
    }

    #[test]
    fn random_instance_certificate_has_positive_margin() {
        let p = random_quadratic_instance(4, 2, 2, 0.6, 60).unwrap();
        let cert = certify_centralized_decrease(&p, 1.0, &default_p_grid(&p)).unwrap();
        assert!(cert.margin > 0.0);
        assert!(cert.lambda_min_p > 0.0);
        assert!(cert.a > 0.0);
        assert!(cert.mu >= 1.0 - 1e-9);
    }

    #[test]
    fn decrease_weight_shrinks_along_centralized_runs() {
        let p = random_quadratic_instance(3, 2, 2, 0.7, 61).unwrap();
        let cert = certify_centralized_decrease(&p, 1.0, &default_p_grid(&p)).unwrap();
        let sp = crate::oracle::solve_kkt_quadratic(&p).unwrap();
        let x0 = DVector::zeros(p.total_primal_dim());
        let lambda0 = vec![DVector::zeros(2); 3];
        let traj =
            crate::oracle::centralized_primal_dual(&p, 0.02, 1.0, 3000, x0, lambda0).unwrap();
        let w_of = |state: &crate::oracle::CentralizedState| {
            let mut chi = DVector::zeros(p.total_primal_dim() + 6);
            chi.rows_mut(0, p.total_primal_dim())
                .copy_from(&(&state.x - &sp.x_star));
            for i in 0..3 {
                chi.rows_mut(p.total_primal_dim() + 2 * i, 2)
                    .copy_from(&(&state.lambdas[i] - &sp.lambda_star));
            }
            (chi.transpose() * &cert.p_matrix * chi)[(0, 0)]
        };
        let values: Vec<f64> = traj.iter().map(w_of).collect();
        for pair in values.windows(2) {
            assert!(
                pair[1] <= pair[0] * (1.0 + 1e-9),
                "{} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn pair_graph_lyapunov_solution_is_exact() {
        let g = Graph::new(2, &[(0, 1)]).unwrap();
        let agg = build_aggregate(&g, 1, 1.0, 0.5);
        let split = split_spectrum(&agg, 1e-8).unwrap();
        let cert = certify_contraction(&split).unwrap();
        assert!(
            (&cert.q_matrix - DMatrix::identity(4, 4) * (4.0 / 3.0))
                .abs()
                .max()
                < 1e-12
        );
        assert!((cert.b1 - 4.0 / 3.0).abs() < 1e-12);
        assert!((cert.b2 - 4.0 / 3.0).abs() < 1e-12);
        assert!(cert.residual <= 1e-12);
    }

    #[test]
    fn cycle_lyapunov_certificate_holds() {
        let g = Graph::cycle(3).unwrap();
        let agg = build_aggregate(&g, 1, 1.0, 0.5);
        let split = split_spectrum(&agg, 1e-8).unwrap();
        let cert = certify_contraction(&split).unwrap();
        assert!(cert.b1 > 0.0);
        assert!(cert.residual <= 1e-10);

        // The quadratic decrease holds pointwise.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let z = DVector::from_fn(split.perp_dim, |_, _| rng.random_range(-3.0..3.0));
            let u_now = (z.transpose() * &cert.q_matrix * &z)[(0, 0)];
            let tz = &split.t_perp * &z;
            let u_next = (tz.transpose() * &cert.q_matrix * tz)[(0, 0)];
            assert!(u_next - u_now <= -cert.b3 * z.norm_squared() + 1e-9);
            assert!(u_now >= cert.b1 * z.norm_squared() - 1e-9);
            assert!(u_now <= cert.b2 * z.norm_squared() + 1e-9);
        }
    }

    #[test]
    fn edgeless_split_is_vacuously_certified() {
        let g = Graph::new(1, &[]).unwrap();
        let agg = build_aggregate(&g, 2, 1.0, 0.5);
        assert_eq!(agg.z_dim(), 0);
        let split = split_spectrum(&agg, 1e-8).unwrap();
        assert_eq!(split.unit_dim, 0);
        assert_eq!(split.perp_dim, 0);
        let cert = certify_contraction(&split).unwrap();
        assert_eq!(cert.residual, 0.0);
        assert_eq!(cert.q_matrix.nrows(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn average_matches_brute_force(seed in 0u64..40) {
            let p = random_quadratic_instance(4, 2, 3, 0.5, seed).unwrap();
            let (x, lambda) = random_point(&p, seed + 500);
            let avg = alpha(&x, &lambda, &p).unwrap();
            let m = 3;
            let mut expected = DVector::zeros(2 * m);
            for i in 0..4 {
                let xi = DVector::from(x.rows(p.agent_range(i).start, 2));
                let res = p.a_block(i) * xi - p.b_allot(i);
                for k in 0..m {
                    expected[k] += res[k] / 4.0;
                    expected[m + k] += lambda[m * i + k] / 4.0;
                }
            }
            prop_assert!((avg - expected).abs().max() <= 1e-14);
        }
    }
}
