//! Constraint-coupled optimization instances.
//!
//! ```text
//!   minimize   Σ_i f_i(x_i)
//!   subject to Σ_i A_i x_i = b,        x_i ∈ ℝ^{n_i}, b ∈ ℝ^m
//! ```
//!
//! Each agent owns a local cost f_i and a constraint block A_i. The coupling
//! vector b is carried both globally and as per-agent allotments b_i with
//! Σ b_i = b, so the average of the local residuals A_i x_i − b_i equals
//! (1/N)(Ax − b). Validation measures strong convexity of the separable sum
//! and full row rank of the stacked constraint matrix, the two standing
//! requirements for a unique saddle point.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError};

/// Errors from instance construction and evaluation.
#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A local cost with a value-and-gradient contract.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalCost {
    /// f(x) = ½ xᵀQx + qᵀx + c with Q symmetric positive semidefinite.
    Quadratic {
        q_mat: DMatrix<f64>,
        q_vec: DVector<f64>,
        c: f64,
    },
    /// f(x) = a‖x‖² + b(√(‖x‖² + ε²) − ε) + c.
    ///
    /// The smoothed norm keeps the gradient Lipschitz at the origin; the raw
    /// b‖x‖ term would not be.
    ConverterLoss { a: f64, b: f64, c: f64, eps: f64 },
}

impl LocalCost {
    /// Builds the quadratic variant, rejecting asymmetric matrices and
    /// mismatched linear terms.
    pub fn quadratic(
        q_mat: DMatrix<f64>,
        q_vec: DVector<f64>,
        c: f64,
    ) -> Result<Self, ProblemError> {
        if q_mat.nrows() != q_mat.ncols() {
            return Err(ProblemError::DimensionMismatch(format!(
                "quadratic matrix is {}x{}, expected square",
                q_mat.nrows(),
                q_mat.ncols()
            )));
        }
        if q_vec.len() != q_mat.nrows() {
            return Err(ProblemError::DimensionMismatch(format!(
                "linear term has length {}, matrix is {1}x{1}",
                q_vec.len(),
                q_mat.nrows()
            )));
        }
        let asym = (&q_mat - q_mat.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(ProblemError::BadParameter(format!(
                "quadratic matrix asymmetry {asym:.3e} exceeds 1e-12"
            )));
        }
        Ok(LocalCost::Quadratic { q_mat, q_vec, c })
    }

    /// Builds the converter-loss variant, rejecting parameters that break
    /// strong convexity (a ≤ 0) or the smoothing (ε ≤ 0, b < 0).
    pub fn converter_loss(a: f64, b: f64, c: f64, eps: f64) -> Result<Self, ProblemError> {
        if a <= 0.0 || a.is_nan() {
            return Err(ProblemError::BadParameter(format!(
                "converter loss needs a > 0, got {a}"
            )));
        }
        if eps <= 0.0 || eps.is_nan() {
            return Err(ProblemError::BadParameter(format!(
                "converter loss needs eps > 0, got {eps}"
            )));
        }
        if b < 0.0 || b.is_nan() {
            return Err(ProblemError::BadParameter(format!(
                "converter loss needs b >= 0, got {b}"
            )));
        }
        Ok(LocalCost::ConverterLoss { a, b, c, eps })
    }

    /// Cost value at `x`.
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            LocalCost::Quadratic { q_mat, q_vec, c } => {
                0.5 * (x.transpose() * q_mat * x)[(0, 0)] + q_vec.dot(x) + c
            }
            LocalCost::ConverterLoss { a, b, c, eps } => {
                let sq = x.norm_squared();
                a * sq + b * ((sq + eps * eps).sqrt() - eps) + c
            }
        }
    }

    /// Gradient at `x`.
    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            LocalCost::Quadratic { q_mat, q_vec, .. } => q_mat * x + q_vec,
            LocalCost::ConverterLoss { a, b, eps, .. } => {
                let s = (x.norm_squared() + eps * eps).sqrt();
                x * (2.0 * a + b / s)
            }
        }
    }

    /// Lower bound on the Hessian spectrum (strong-convexity modulus).
    pub fn convexity_lower_bound(&self) -> f64 {
        match self {
            LocalCost::Quadratic { q_mat, .. } => {
                if q_mat.nrows() == 0 {
                    f64::INFINITY
                } else {
                    q_mat.clone().symmetric_eigen().eigenvalues.min()
                }
            }
            // The smoothed norm is convex, so its Hessian only adds.
            LocalCost::ConverterLoss { a, .. } => 2.0 * a,
        }
    }

    /// Upper bound on the Hessian spectrum (gradient Lipschitz constant).
    pub fn lipschitz_upper_bound(&self) -> f64 {
        match self {
            LocalCost::Quadratic { q_mat, .. } => {
                if q_mat.nrows() == 0 {
                    0.0
                } else {
                    q_mat.clone().symmetric_eigen().eigenvalues.max()
                }
            }
            LocalCost::ConverterLoss { a, b, eps, .. } => 2.0 * a + b / eps,
        }
    }

    /// True for the quadratic variant.
    pub fn is_quadratic(&self) -> bool {
        matches!(self, LocalCost::Quadratic { .. })
    }
}

/// Splits `b` into `n` equal allotments b_i = b/n, so Σ b_i = b.
pub fn split_b(b: &DVector<f64>, n: usize) -> Vec<DVector<f64>> {
    let share = b / (n as f64);
    vec![share; n]
}

/// An immutable problem instance: topology, costs, constraint blocks, and
/// the coupling vector with its per-agent allotments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProblemJson", into = "ProblemJson")]
pub struct ProblemInstance {
    graph: Graph,
    costs: Vec<LocalCost>,
    a_blocks: Vec<DMatrix<f64>>,
    b: DVector<f64>,
    b_allot: Vec<DVector<f64>>,
    offsets: Vec<usize>,
}

/// Validation report: measured constants and pass flags for the two standing
/// requirements (strong convexity of the sum, full row rank of A).
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub mu_est: f64,
    pub c_est: f64,
    pub sigma_min_a: f64,
    pub strongly_convex: bool,
    pub full_row_rank: bool,
    pub pass: bool,
}

impl ProblemInstance {
    /// Builds an instance with the default equal-split allotment b_i = b/N.
    pub fn new(
        graph: Graph,
        costs: Vec<LocalCost>,
        a_blocks: Vec<DMatrix<f64>>,
        b: DVector<f64>,
    ) -> Result<Self, ProblemError> {
        let allot = split_b(&b, graph.node_count());
        Self::with_b_allotment(graph, costs, a_blocks, b, allot)
    }

    /// Builds an instance with an explicit allotment; Σ b_i must equal b.
    pub fn with_b_allotment(
        graph: Graph,
        costs: Vec<LocalCost>,
        a_blocks: Vec<DMatrix<f64>>,
        b: DVector<f64>,
        b_allot: Vec<DVector<f64>>,
    ) -> Result<Self, ProblemError> {
        let n_agents = graph.node_count();
        if costs.len() != n_agents {
            return Err(ProblemError::DimensionMismatch(format!(
                "{} costs for {} agents",
                costs.len(),
                n_agents
            )));
        }
        if a_blocks.len() != n_agents {
            return Err(ProblemError::DimensionMismatch(format!(
                "{} constraint blocks for {} agents",
                a_blocks.len(),
                n_agents
            )));
        }
        if b_allot.len() != n_agents {
            return Err(ProblemError::DimensionMismatch(format!(
                "{} allotments for {} agents",
                b_allot.len(),
                n_agents
            )));
        }
        let m = b.len();
        let mut allot_sum = DVector::zeros(m);
        for (i, (block, share)) in a_blocks.iter().zip(&b_allot).enumerate() {
            if block.nrows() != m {
                return Err(ProblemError::DimensionMismatch(format!(
                    "constraint block {i} has {} rows, coupling vector has {m}",
                    block.nrows()
                )));
            }
            if share.len() != m {
                return Err(ProblemError::DimensionMismatch(format!(
                    "allotment {i} has length {}, coupling vector has {m}",
                    share.len()
                )));
            }
            allot_sum += share;
        }
        if (&allot_sum - &b).abs().max() > 1e-12 {
            return Err(ProblemError::BadParameter(
                "allotments do not sum to the coupling vector".into(),
            ));
        }
        for (i, (cost, block)) in costs.iter().zip(&a_blocks).enumerate() {
            if let LocalCost::Quadratic { q_mat, .. } = cost {
                if q_mat.nrows() != block.ncols() {
                    return Err(ProblemError::DimensionMismatch(format!(
                        "cost {i} has dimension {}, constraint block has {} columns",
                        q_mat.nrows(),
                        block.ncols()
                    )));
                }
            }
        }
        let mut offsets = Vec::with_capacity(n_agents + 1);
        let mut acc = 0;
        for block in &a_blocks {
            offsets.push(acc);
            acc += block.ncols();
        }
        offsets.push(acc);
        Ok(ProblemInstance {
            graph,
            costs,
            a_blocks,
            b,
            b_allot,
            offsets,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Number of agents N.
    pub fn n_agents(&self) -> usize {
        self.graph.node_count()
    }

    /// Coupling dimension m.
    pub fn constraint_dim(&self) -> usize {
        self.b.len()
    }

    /// Local decision dimension n_i.
    pub fn local_dim(&self, i: usize) -> usize {
        self.a_blocks[i].ncols()
    }

    /// Total stacked dimension n = Σ n_i.
    pub fn total_primal_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Index range of agent `i`'s block inside the stacked vector.
    pub fn agent_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn cost(&self, i: usize) -> &LocalCost {
        &self.costs[i]
    }

    pub fn costs(&self) -> &[LocalCost] {
        &self.costs
    }

    pub fn a_block(&self, i: usize) -> &DMatrix<f64> {
        &self.a_blocks[i]
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// Per-agent allotment b_i.
    pub fn b_allot(&self, i: usize) -> &DVector<f64> {
        &self.b_allot[i]
    }

    /// Stacked constraint matrix A = [A_1 … A_N], m × n.
    pub fn stacked_a(&self) -> DMatrix<f64> {
        let m = self.constraint_dim();
        let mut a = DMatrix::zeros(m, self.total_primal_dim());
        for (i, block) in self.a_blocks.iter().enumerate() {
            a.view_mut((0, self.offsets[i]), (m, block.ncols()))
                .copy_from(block);
        }
        a
    }

    /// Total cost Σ f_i(x_i) at a stacked point.
    pub fn eval_total(&self, x: &DVector<f64>) -> Result<f64, ProblemError> {
        self.check_stacked(x)?;
        Ok(self
            .costs
            .iter()
            .enumerate()
            .map(|(i, f)| f.eval(&DVector::from(x.rows(self.offsets[i], self.local_dim(i)))))
            .sum())
    }

    /// Stacked gradient col(∇f_1(x_1), …, ∇f_N(x_N)).
    pub fn grad_total(&self, x: &DVector<f64>) -> Result<DVector<f64>, ProblemError> {
        self.check_stacked(x)?;
        let mut g = DVector::zeros(self.total_primal_dim());
        for (i, f) in self.costs.iter().enumerate() {
            let xi = DVector::from(x.rows(self.offsets[i], self.local_dim(i)));
            g.rows_mut(self.offsets[i], self.local_dim(i))
                .copy_from(&f.grad(&xi));
        }
        Ok(g)
    }

    /// True when every local cost is quadratic.
    pub fn is_quadratic(&self) -> bool {
        self.costs.iter().all(LocalCost::is_quadratic)
    }

    /// For all-quadratic instances, the block-diagonal Hessian and stacked
    /// linear term of the total cost.
    pub fn quadratic_parts(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let n = self.total_primal_dim();
        let mut h = DMatrix::zeros(n, n);
        let mut lin = DVector::zeros(n);
        for (i, cost) in self.costs.iter().enumerate() {
            match cost {
                LocalCost::Quadratic { q_mat, q_vec, .. } => {
                    let o = self.offsets[i];
                    h.view_mut((o, o), (q_mat.nrows(), q_mat.ncols()))
                        .copy_from(q_mat);
                    lin.rows_mut(o, q_vec.len()).copy_from(q_vec);
                }
                LocalCost::ConverterLoss { .. } => return None,
            }
        }
        Some((h, lin))
    }

    fn check_stacked(&self, x: &DVector<f64>) -> Result<(), ProblemError> {
        if x.len() != self.total_primal_dim() {
            return Err(ProblemError::DimensionMismatch(format!(
                "stacked vector has length {}, instance has {}",
                x.len(),
                self.total_primal_dim()
            )));
        }
        Ok(())
    }

    /// Measures the standing requirements: strong-convexity modulus of the
    /// separable sum (exact for quadratics, declared bound 2·min aᵢ for
    /// converter losses), a gradient Lipschitz estimate, and σ_min of the
    /// stacked A against `rank_tol` (pass `None` for 1e-8·σ_max).
    pub fn validate(&self, rank_tol: Option<f64>) -> ValidationReport {
        let mu_est = self
            .costs
            .iter()
            .map(LocalCost::convexity_lower_bound)
            .fold(f64::INFINITY, f64::min);
        let c_est = self
            .costs
            .iter()
            .map(LocalCost::lipschitz_upper_bound)
            .fold(0.0, f64::max);
        let svals = self.stacked_a().svd(false, false).singular_values;
        let sigma_max = svals.iter().copied().fold(0.0, f64::max);
        let sigma_min = svals.iter().copied().fold(f64::INFINITY, f64::min);
        let sigma_min = if svals.len() < self.constraint_dim() {
            // Wider than tall is impossible here (min(m,n) values returned),
            // so fewer values than m means rank-deficient by shape.
            0.0
        } else {
            sigma_min
        };
        let tol = rank_tol.unwrap_or(1e-8 * sigma_max);
        let strongly_convex = mu_est > 0.0;
        let full_row_rank = sigma_min > tol;
        ValidationReport {
            mu_est,
            c_est,
            sigma_min_a: sigma_min,
            strongly_convex,
            full_row_rank,
            pass: strongly_convex && full_row_rank,
        }
    }
}

/// Global constraint residual Ax − b at a stacked point.
pub fn global_residual(
    p: &ProblemInstance,
    x: &DVector<f64>,
) -> Result<DVector<f64>, ProblemError> {
    if x.len() != p.total_primal_dim() {
        return Err(ProblemError::DimensionMismatch(format!(
            "stacked vector has length {}, instance has {}",
            x.len(),
            p.total_primal_dim()
        )));
    }
    let mut r = -p.b().clone();
    for i in 0..p.n_agents() {
        let xi = x.rows(p.agent_range(i).start, p.local_dim(i));
        r += p.a_block(i) * xi;
    }
    Ok(r)
}

/// Builds the power-balance instance: one grid interface plus `n_units`
/// converter units, each deciding an m-dimensional current vector.
///
/// Agent 0 pays the interface loss 3·r_g·‖x₀‖². Unit i ≥ 1 pays
/// aᵢ‖x‖² + bᵢ(√(‖x‖²+ε²)−ε) + cᵢ; units with bᵢ = 0 degrade to plain
/// quadratics so the closed-form oracle applies. Every block is A_i = I_m and
/// the coupling vector is the demand, so the constraint reads Σ xᵢ = g.
/// Agents communicate over a ring.
pub fn microgrid_instance(
    n_units: usize,
    r_g: f64,
    unit_params: &[(f64, f64, f64)],
    g_demand: DVector<f64>,
    eps: f64,
) -> Result<ProblemInstance, ProblemError> {
    if n_units == 0 {
        return Err(ProblemError::BadParameter(
            "need at least one converter unit".into(),
        ));
    }
    if unit_params.len() != n_units {
        return Err(ProblemError::DimensionMismatch(format!(
            "{} unit parameter triples for {} units",
            unit_params.len(),
            n_units
        )));
    }
    if r_g <= 0.0 || r_g.is_nan() {
        return Err(ProblemError::BadParameter(format!(
            "interface resistance must be positive, got {r_g}"
        )));
    }
    let m = g_demand.len();
    let n_agents = n_units + 1;
    let mut costs = Vec::with_capacity(n_agents);
    costs.push(LocalCost::quadratic(
        DMatrix::identity(m, m) * (6.0 * r_g),
        DVector::zeros(m),
        0.0,
    )?);
    for &(a, b, c) in unit_params {
        if b == 0.0 {
            if a <= 0.0 || a.is_nan() {
                return Err(ProblemError::BadParameter(format!(
                    "unit needs a > 0, got {a}"
                )));
            }
            costs.push(LocalCost::quadratic(
                DMatrix::identity(m, m) * (2.0 * a),
                DVector::zeros(m),
                c,
            )?);
        } else {
            costs.push(LocalCost::converter_loss(a, b, c, eps)?);
        }
    }
    let a_blocks = vec![DMatrix::identity(m, m); n_agents];
    let graph = Graph::cycle(n_agents)?;
    ProblemInstance::new(graph, costs, a_blocks, g_demand)
}

/// Seeded default parameters for the power-balance instance: unit costs with
/// aᵢ ∈ [0.5, 1.5], bᵢ ∈ [0, 0.1], cᵢ = 0, and demand entries in [−1, 1].
pub fn microgrid_default_params(
    n_units: usize,
    m: usize,
    seed: u64,
) -> (Vec<(f64, f64, f64)>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = (0..n_units)
        .map(|_| {
            let a = rng.random_range(0.5..1.5);
            let b = rng.random_range(0.0..0.1);
            (a, b, 0.0)
        })
        .collect();
    let g = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    (params, g)
}

/// Samples a strongly convex quadratic instance over a random connected
/// topology. Hessians are Mᵀ M + 3I, constraint blocks and linear terms have
/// entries in [−1, 1]. Deterministic in the seed.
///
/// The ridge keeps the local curvature above the stacked constraint gain
/// (σ_max of the stacked blocks is about 3 at these scales), so the slow
/// primal-dual modes are overdamped and the distance decays without ringing.
pub fn random_quadratic_instance(
    n_agents: usize,
    local_dim: usize,
    constraint_dim: usize,
    edge_prob: f64,
    seed: u64,
) -> Result<ProblemInstance, ProblemError> {
    let graph = Graph::random_connected(n_agents, edge_prob, seed)?;
    random_quadratic_on_graph(graph, local_dim, constraint_dim, seed)
}

/// Same sampling on a caller-supplied topology.
pub fn random_quadratic_on_graph(
    graph: Graph,
    local_dim: usize,
    constraint_dim: usize,
    seed: u64,
) -> Result<ProblemInstance, ProblemError> {
    let n_agents = graph.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut costs = Vec::with_capacity(n_agents);
    let mut a_blocks = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let m_rand = DMatrix::from_fn(local_dim, local_dim, |_, _| rng.random_range(-1.0..1.0));
        // Curvature floor above the constraint coupling: keeps the slow
        // primal-dual modes overdamped so traces decay without ringing.
        let q_mat = &m_rand.transpose() * &m_rand + 3.0 * DMatrix::identity(local_dim, local_dim);
        let q_vec = DVector::from_fn(local_dim, |_, _| rng.random_range(-1.0..1.0));
        costs.push(LocalCost::quadratic(q_mat, q_vec, 0.0)?);
        a_blocks.push(DMatrix::from_fn(constraint_dim, local_dim, |_, _| {
            rng.random_range(-1.0..1.0)
        }));
    }
    let b = DVector::from_fn(constraint_dim, |_, _| rng.random_range(-1.0..1.0));
    ProblemInstance::new(graph, costs, a_blocks, b)
}

/// Wire form:
/// `{"graph":…, "costs":[{"type":"quadratic","Q":…}|{"type":"converter_loss","a":…}], "A":[…], "b":[…]}`.
#[derive(Serialize, Deserialize)]
struct ProblemJson {
    graph: Graph,
    costs: Vec<CostJson>,
    #[serde(rename = "A")]
    a: Vec<Vec<Vec<f64>>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum CostJson {
    Quadratic {
        #[serde(rename = "Q")]
        q: Vec<Vec<f64>>,
        #[serde(default)]
        lin: Option<Vec<f64>>,
        #[serde(default)]
        c: f64,
    },
    ConverterLoss {
        a: f64,
        #[serde(default)]
        b: f64,
        #[serde(default)]
        c: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_eps() -> f64 {
    1e-3
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ProblemError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(ProblemError::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

impl From<ProblemInstance> for ProblemJson {
    fn from(p: ProblemInstance) -> Self {
        let costs = p
            .costs
            .iter()
            .map(|cost| match cost {
                LocalCost::Quadratic { q_mat, q_vec, c } => CostJson::Quadratic {
                    q: matrix_to_rows(q_mat),
                    lin: Some(q_vec.iter().copied().collect()),
                    c: *c,
                },
                LocalCost::ConverterLoss { a, b, c, eps } => CostJson::ConverterLoss {
                    a: *a,
                    b: *b,
                    c: *c,
                    eps: *eps,
                },
            })
            .collect();
        ProblemJson {
            graph: p.graph.clone(),
            costs,
            a: p.a_blocks.iter().map(matrix_to_rows).collect(),
            b: p.b.iter().copied().collect(),
        }
    }
}

impl TryFrom<ProblemJson> for ProblemInstance {
    type Error = ProblemError;

    fn try_from(json: ProblemJson) -> Result<Self, ProblemError> {
        let costs = json
            .costs
            .into_iter()
            .map(|c| match c {
                CostJson::Quadratic { q, lin, c } => {
                    let q_mat = rows_to_matrix(&q)?;
                    let q_vec = match lin {
                        Some(v) => DVector::from_vec(v),
                        None => DVector::zeros(q_mat.nrows()),
                    };
                    LocalCost::quadratic(q_mat, q_vec, c)
                }
                CostJson::ConverterLoss { a, b, c, eps } => LocalCost::converter_loss(a, b, c, eps),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let a_blocks = json
            .a
            .iter()
            .map(|rows| rows_to_matrix(rows))
            .collect::<Result<Vec<_>, _>>()?;
        ProblemInstance::new(json.graph, costs, a_blocks, DVector::from_vec(json.b))
    }
}
