//! Batch experiment driver behind the command-line binary.
//!
//! Loads a JSON run configuration, builds the instance, computes the
//! centralized reference point, executes the requested experiment, and
//! writes artifacts (CSV traces, a JSON summary, static SVG plots) into an
//! output directory. Exit codes: 0 converged, 1 configuration or input
//! error, 2 iteration budget exhausted, 3 diverged.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    build_aggregate, certify_centralized_decrease, certify_contraction, check_reconstruction,
    default_p_grid, spectral_radius, split_spectrum, AnalysisError, DECREASE_MARGIN_FLOOR,
};
use crate::network::{
    find_converging_gamma, run, write_trace_csv_file, RunStatus, ScheduleKind, ScheduleModel,
    StepParams, StopRule, Trace, WorldState,
};
use crate::oracle::{solve_kkt_quadratic, solve_saddle_point_pd, SaddlePoint};
use crate::plot::{line_plot_svg, Series};
use crate::problem::{
    global_residual, microgrid_default_params, microgrid_instance, random_quadratic_instance,
    ProblemInstance,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_MAX_ITER: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Schema version this build reads.
pub const CONFIG_VERSION: u32 = 1;

/// JSON run configuration.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub problem: ProblemSource,
    pub params: StepParams,
    #[serde(default = "ScheduleConfig::sync")]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub p_drop: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tol_d")]
    pub tol_d: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_tol_d() -> f64 {
    1e-8
}

fn default_max_iter() -> u64 {
    1_000_000
}

/// Where the instance comes from.
#[derive(Debug, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ProblemSource {
    /// Full instance spelled out in the config.
    Inline { instance: Box<ProblemInstance> },
    /// Seeded power-balance generator.
    Microgrid {
        n_units: usize,
        m: usize,
        r_g: f64,
        #[serde(default = "default_smoothing")]
        eps: f64,
        seed: u64,
    },
    /// Seeded strongly convex quadratic generator.
    RandomQuadratic {
        n_agents: usize,
        local_dim: usize,
        constraint_dim: usize,
        edge_prob: f64,
        seed: u64,
    },
}

fn default_smoothing() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleConfig {
    Sync,
    Async { p_act: f64 },
}

impl ScheduleConfig {
    fn sync() -> Self {
        ScheduleConfig::Sync
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| format!("cannot parse config {}: {e}", path.display()))?;
        if config.version != CONFIG_VERSION {
            return Err(format!(
                "config version {} not supported; this build reads version {CONFIG_VERSION}",
                config.version
            ));
        }
        if config.tol_d <= 0.0 || config.tol_d.is_nan() {
            return Err(format!("tol_d must be positive, got {}", config.tol_d));
        }
        Ok(config)
    }

    pub fn build_instance(&self) -> Result<ProblemInstance, String> {
        match &self.problem {
            ProblemSource::Inline { instance } => Ok((**instance).clone()),
            ProblemSource::Microgrid {
                n_units,
                m,
                r_g,
                eps,
                seed,
            } => {
                let (unit_params, g) = microgrid_default_params(*n_units, *m, *seed);
                microgrid_instance(*n_units, *r_g, &unit_params, g, *eps)
                    .map_err(|e| format!("microgrid generator: {e}"))
            }
            ProblemSource::RandomQuadratic {
                n_agents,
                local_dim,
                constraint_dim,
                edge_prob,
                seed,
            } => {
                random_quadratic_instance(*n_agents, *local_dim, *constraint_dim, *edge_prob, *seed)
                    .map_err(|e| format!("random instance generator: {e}"))
            }
        }
    }

    pub fn schedule_model(&self, seed: u64) -> ScheduleModel {
        match self.schedule {
            ScheduleConfig::Sync => ScheduleModel {
                kind: ScheduleKind::Synchronous,
                p_drop: self.p_drop,
                seed,
            },
            ScheduleConfig::Async { p_act } => {
                ScheduleModel::asynchronous(p_act, self.p_drop, seed)
            }
        }
    }

    pub fn stop_rule(&self) -> StopRule {
        StopRule {
            tol_d: self.tol_d,
            max_iter: self.max_iter,
        }
    }
}

/// Computes the reference saddle point: closed form for quadratic costs,
/// centralized iteration to 1e−10 otherwise.
pub fn compute_reference(p: &ProblemInstance, kappa: f64) -> Result<SaddlePoint, String> {
    if p.is_quadratic() {
        solve_kkt_quadratic(p).map_err(|e| format!("closed-form reference solve: {e}"))
    } else {
        solve_saddle_point_pd(p, kappa, 2_000_000, 1e-10)
            .map_err(|e| format!("centralized reference solve: {e}"))
    }
}

fn validate_instance(p: &ProblemInstance) -> Result<(), String> {
    let report = p.validate(None);
    if !report.strongly_convex {
        return Err(format!(
            "instance is not strongly convex (measured modulus {}); a unique solution is not guaranteed",
            report.mu_est
        ));
    }
    if !report.full_row_rank {
        return Err(format!(
            "stacked constraint matrix is not full row rank (smallest singular value {:.3e}); multipliers are not unique",
            report.sigma_min_a
        ));
    }
    Ok(())
}

fn status_exit(status: RunStatus) -> i32 {
    match status {
        RunStatus::Converged => EXIT_OK,
        RunStatus::MaxIter => EXIT_MAX_ITER,
        RunStatus::Diverged => EXIT_DIVERGED,
    }
}

fn combine_status(a: RunStatus, b: RunStatus) -> RunStatus {
    use RunStatus::*;
    match (a, b) {
        (Diverged, _) | (_, Diverged) => Diverged,
        (MaxIter, _) | (_, MaxIter) => MaxIter,
        _ => Converged,
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    status: RunStatus,
    iterations: u64,
    final_d: f64,
    params: &'a StepParams,
    seed: u64,
}

#[derive(Serialize)]
struct LegSummary {
    status: RunStatus,
    iterations: u64,
    final_d: f64,
    final_primal_residual: f64,
}

#[derive(Serialize)]
struct CompareSummary<'a> {
    status: RunStatus,
    iterations: u64,
    final_d: f64,
    params: &'a StepParams,
    seed: u64,
    legs: CompareLegs,
}

#[derive(Serialize)]
struct CompareLegs {
    synchronous: LegSummary,
    asynchronous: LegSummary,
}

fn leg_summary(trace: &Trace) -> LegSummary {
    let x = trace.final_world.stacked_x();
    let residual = global_residual(&trace.final_world.problem, &x)
        .map(|r| r.norm())
        .unwrap_or(f64::NAN);
    LegSummary {
        status: trace.status,
        iterations: trace.iterations(),
        final_d: trace.final_d(),
        final_primal_residual: residual,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| format!("cannot serialize {}: {e}", path.display()))?;
    fs::write(path, text + "\n").map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn ensure_out_dir(out: Option<&Path>, config_dir: Option<&PathBuf>) -> Result<PathBuf, String> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| config_dir.cloned())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .map_err(|e| format!("cannot create output dir {}: {e}", dir.display()))?;
    Ok(dir)
}

fn d_points(trace: &Trace) -> Vec<(f64, f64)> {
    trace.records.iter().map(|r| (r.tick as f64, r.d)).collect()
}

/// Runs one experiment from a config file and writes trace.csv,
/// summary.json, and convergence.svg.
pub fn cmd_run(config_path: &Path, out: Option<&Path>, seed_override: Option<u64>) -> i32 {
    match run_inner(config_path, out, seed_override) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_CONFIG
        }
    }
}

fn run_inner(
    config_path: &Path,
    out: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<i32, String> {
    let config = RunConfig::from_file(config_path)?;
    let out_dir = ensure_out_dir(out, config.out_dir.as_ref())?;
    let seed = seed_override.unwrap_or(config.seed);

    let instance = Arc::new(config.build_instance()?);
    validate_instance(&instance)?;
    let model = config.schedule_model(seed);
    config.params.validate().map_err(|e| e.to_string())?;
    model.validate().map_err(|e| e.to_string())?;

    let reference = compute_reference(&instance, config.params.kappa)?;
    let world = WorldState::zero_init(Arc::clone(&instance));
    let trace = run(
        world,
        &config.params,
        &model,
        &reference,
        &config.stop_rule(),
    )
    .map_err(|e| e.to_string())?;

    write_trace_csv_file(&trace, &out_dir.join("trace.csv"))
        .map_err(|e| format!("cannot write trace: {e}"))?;
    write_json(
        &out_dir.join("summary.json"),
        &RunSummary {
            status: trace.status,
            iterations: trace.iterations(),
            final_d: trace.final_d(),
            params: &config.params,
            seed,
        },
    )?;
    let svg = line_plot_svg(
        "distance to reference solution",
        "tick",
        "d (log scale)",
        &[Series {
            label: "run",
            points: d_points(&trace),
            color: "#1f77b4",
        }],
        true,
    );
    fs::write(out_dir.join("convergence.svg"), svg)
        .map_err(|e| format!("cannot write plot: {e}"))?;

    println!(
        "status={:?} iterations={} final_d={:.3e}",
        trace.status,
        trace.iterations(),
        trace.final_d()
    );
    Ok(status_exit(trace.status))
}

/// Runs the synchronous and asynchronous legs on one instance and writes
/// combined artifacts. The config's schedule is the asynchronous leg.
pub fn cmd_compare(config_path: &Path, out: Option<&Path>, seed_override: Option<u64>) -> i32 {
    match compare_inner(config_path, out, seed_override) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_CONFIG
        }
    }
}

fn compare_inner(
    config_path: &Path,
    out: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<i32, String> {
    let config = RunConfig::from_file(config_path)?;
    let ScheduleConfig::Async { p_act } = config.schedule else {
        return Err("compare needs schedule.kind = \"async\" to define its second leg".into());
    };
    let out_dir = ensure_out_dir(out, config.out_dir.as_ref())?;
    let seed = seed_override.unwrap_or(config.seed);

    let instance = Arc::new(config.build_instance()?);
    validate_instance(&instance)?;
    config.params.validate().map_err(|e| e.to_string())?;
    let async_model = ScheduleModel::asynchronous(p_act, config.p_drop, seed);
    async_model.validate().map_err(|e| e.to_string())?;

    let reference = compute_reference(&instance, config.params.kappa)?;
    let stop = config.stop_rule();
    let code = write_compare_artifacts(
        &instance,
        &reference,
        &config.params,
        &async_model,
        &stop,
        &out_dir,
        seed,
    )?;
    Ok(code)
}

fn write_compare_artifacts(
    instance: &Arc<ProblemInstance>,
    reference: &SaddlePoint,
    params: &StepParams,
    async_model: &ScheduleModel,
    stop: &StopRule,
    out_dir: &Path,
    seed: u64,
) -> Result<i32, String> {
    let sync_trace = run(
        WorldState::zero_init(Arc::clone(instance)),
        params,
        &ScheduleModel::synchronous(),
        reference,
        stop,
    )
    .map_err(|e| e.to_string())?;
    let async_trace = run(
        WorldState::zero_init(Arc::clone(instance)),
        params,
        async_model,
        reference,
        stop,
    )
    .map_err(|e| e.to_string())?;

    write_trace_csv_file(&sync_trace, &out_dir.join("sync_trace.csv"))
        .map_err(|e| format!("cannot write sync trace: {e}"))?;
    write_trace_csv_file(&async_trace, &out_dir.join("async_trace.csv"))
        .map_err(|e| format!("cannot write async trace: {e}"))?;

    let mut combined = String::from("tick,d_sync,d_async\n");
    let rows = sync_trace.records.len().max(async_trace.records.len());
    for k in 0..rows {
        let tick = sync_trace
            .records
            .get(k)
            .or_else(|| async_trace.records.get(k))
            .map_or(k as u64, |r| r.tick);
        let d_sync = sync_trace
            .records
            .get(k)
            .map(|r| r.d.to_string())
            .unwrap_or_default();
        let d_async = async_trace
            .records
            .get(k)
            .map(|r| r.d.to_string())
            .unwrap_or_default();
        combined.push_str(&format!("{tick},{d_sync},{d_async}\n"));
    }
    fs::write(out_dir.join("combined.csv"), combined)
        .map_err(|e| format!("cannot write combined trace: {e}"))?;

    let svg = line_plot_svg(
        "synchronous vs asynchronous convergence",
        "tick",
        "d (log scale)",
        &[
            Series {
                label: "synchronous",
                points: d_points(&sync_trace),
                color: "#1f77b4",
            },
            Series {
                label: "asynchronous",
                points: d_points(&async_trace),
                color: "#d62728",
            },
        ],
        true,
    );
    fs::write(out_dir.join("compare.svg"), svg).map_err(|e| format!("cannot write plot: {e}"))?;

    let status = combine_status(sync_trace.status, async_trace.status);
    write_json(
        &out_dir.join("summary.json"),
        &CompareSummary {
            status,
            iterations: async_trace.iterations(),
            final_d: async_trace.final_d(),
            params,
            seed,
            legs: CompareLegs {
                synchronous: leg_summary(&sync_trace),
                asynchronous: leg_summary(&async_trace),
            },
        },
    )?;

    println!(
        "sync: status={:?} iterations={} | async: status={:?} iterations={}",
        sync_trace.status,
        sync_trace.iterations(),
        async_trace.status,
        async_trace.iterations()
    );
    Ok(status_exit(status))
}

#[derive(Serialize)]
struct CheckRow {
    name: String,
    pass: bool,
    detail: String,
}

/// Runs the certification suite on the configured instance and prints a
/// pass/fail table. Exit 0 only when every check passes.
pub fn cmd_verify(config_path: &Path, out: Option<&Path>) -> i32 {
    match verify_inner(config_path, out) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_CONFIG
        }
    }
}

fn verify_inner(config_path: &Path, out: Option<&Path>) -> Result<i32, String> {
    let config = RunConfig::from_file(config_path)?;
    let out_dir = ensure_out_dir(out, config.out_dir.as_ref())?;
    let instance = config.build_instance()?;
    config.params.validate().map_err(|e| e.to_string())?;

    let mut rows: Vec<CheckRow> = Vec::new();
    let report = instance.validate(None);
    rows.push(CheckRow {
        name: "strong convexity of the cost sum".into(),
        pass: report.strongly_convex,
        detail: format!("measured modulus {:.6e}", report.mu_est),
    });
    rows.push(CheckRow {
        name: "full row rank of the stacked constraint matrix".into(),
        pass: report.full_row_rank,
        detail: format!("smallest singular value {:.6e}", report.sigma_min_a),
    });

    let mut certificates = serde_json::Map::new();
    certificates.insert(
        "validation".into(),
        serde_json::to_value(&report).map_err(|e| e.to_string())?,
    );

    if report.pass {
        let agg = build_aggregate(
            instance.graph(),
            instance.constraint_dim(),
            config.params.rho,
            config.params.beta,
        );
        let max_modulus = spectral_radius(&agg.t);
        rows.push(CheckRow {
            name: "gossip spectrum inside the closed unit disk".into(),
            pass: max_modulus <= 1.0 + 1e-10,
            detail: format!("largest modulus {max_modulus:.12}"),
        });

        match split_spectrum(&agg, 1e-8) {
            Ok(split) => {
                rows.push(CheckRow {
                    name: "contracting block strictly inside the unit circle".into(),
                    pass: split.perp_dim == 0 || split.spectral_radius < 1.0,
                    detail: format!(
                        "unit multiplicity {}, contraction radius {:.6}",
                        split.unit_dim, split.spectral_radius
                    ),
                });
                certificates.insert(
                    "spectrum".into(),
                    serde_json::json!({
                        "max_modulus": max_modulus,
                        "unit_dim": split.unit_dim,
                        "perp_dim": split.perp_dim,
                        "spectral_radius": split.spectral_radius,
                    }),
                );

                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                let mut max_err = 0.0f64;
                for _ in 0..50 {
                    let x = DVector::from_fn(instance.total_primal_dim(), |_, _| {
                        rng.random_range(-2.0..2.0)
                    });
                    let lambda = DVector::from_fn(
                        instance.constraint_dim() * instance.n_agents(),
                        |_, _| rng.random_range(-2.0..2.0),
                    );
                    let err = check_reconstruction(&x, &lambda, &split, &agg, &instance)
                        .map_err(|e| e.to_string())?;
                    max_err = max_err.max(err);
                }
                rows.push(CheckRow {
                    name: "proxy reconstruction at the consensus fixed point".into(),
                    pass: max_err <= 1e-9,
                    detail: format!("max error {max_err:.3e} over 50 samples"),
                });
                certificates.insert(
                    "reconstruction".into(),
                    serde_json::json!({"max_error": max_err, "samples": 50}),
                );

                match certify_contraction(&split) {
                    Ok(cert) => {
                        rows.push(CheckRow {
                            name: "contraction Lyapunov certificate".into(),
                            pass: (cert.perp_dim == 0 || cert.b1 > 0.0) && cert.residual <= 1e-10,
                            detail: format!(
                                "bounds [{:.4}, {:.4}], equation residual {:.3e}",
                                cert.b1, cert.b2, cert.residual
                            ),
                        });
                        certificates.insert(
                            "contraction_certificate".into(),
                            serde_json::to_value(&cert).map_err(|e| e.to_string())?,
                        );
                    }
                    Err(e) => rows.push(CheckRow {
                        name: "contraction Lyapunov certificate".into(),
                        pass: false,
                        detail: e.to_string(),
                    }),
                }
            }
            Err(e @ AnalysisError::SpectralAmbiguity { .. }) => rows.push(CheckRow {
                name: "spectral split".into(),
                pass: false,
                detail: format!("{e}; try a different beta or report the topology"),
            }),
            Err(e) => rows.push(CheckRow {
                name: "spectral split".into(),
                pass: false,
                detail: e.to_string(),
            }),
        }

        if instance.is_quadratic() {
            match certify_centralized_decrease(
                &instance,
                config.params.kappa,
                &default_p_grid(&instance),
            ) {
                Ok(cert) => {
                    rows.push(CheckRow {
                        name: "centralized field decrease certificate".into(),
                        pass: cert.margin >= DECREASE_MARGIN_FLOOR && cert.lambda_min_p > 0.0,
                        detail: format!(
                            "weight {:.4e}, margin {:.6e}, reported bound {:.6e}",
                            cert.p, cert.margin, cert.q_reported
                        ),
                    });
                    certificates.insert(
                        "decrease_certificate".into(),
                        serde_json::to_value(&cert).map_err(|e| e.to_string())?,
                    );
                }
                Err(e) => rows.push(CheckRow {
                    name: "centralized field decrease certificate".into(),
                    pass: false,
                    detail: format!("{e}; widen the weight grid or check the instance"),
                }),
            }
        } else {
            rows.push(CheckRow {
                name: "centralized field decrease certificate".into(),
                pass: true,
                detail: "skipped: closed-form check needs all-quadratic costs".into(),
            });
        }
    }

    let all_pass = rows.iter().all(|r| r.pass);
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for row in &rows {
        println!(
            "[{}] {:width$}  {}",
            if row.pass { "PASS" } else { "FAIL" },
            row.name,
            row.detail,
        );
    }
    certificates.insert(
        "checks".into(),
        serde_json::to_value(&rows).map_err(|e| e.to_string())?,
    );
    write_json(
        &out_dir.join("certificates.json"),
        &serde_json::Value::Object(certificates),
    )?;
    Ok(if all_pass { EXIT_OK } else { EXIT_CONFIG })
}

/// Parameters for the power-balance comparison.
#[derive(Debug, Clone, Copy)]
pub struct MicrogridArgs {
    pub n_units: usize,
    pub m: usize,
    pub r_g: f64,
    pub eps: f64,
    pub seed: u64,
    pub p_act: f64,
    pub p_drop: f64,
    pub gamma: Option<f64>,
    pub kappa: f64,
    pub rho: f64,
    pub beta: f64,
    pub tol_d: f64,
    pub max_iter: u64,
}

impl Default for MicrogridArgs {
    fn default() -> Self {
        MicrogridArgs {
            n_units: 10,
            m: 5,
            r_g: 0.1,
            eps: 1e-3,
            seed: 7,
            p_act: 0.5,
            p_drop: 0.2,
            gamma: None,
            kappa: 1.0,
            rho: 1.0,
            beta: 0.5,
            // The constraint rows have norm √(N_x+1), so a squared primal
            // distance of 1e−13 keeps the power balance within 1e−6.
            tol_d: 1e-13,
            max_iter: 1_000_000,
        }
    }
}

/// Generates the power-balance instance and runs the two-schedule
/// comparison. γ is searched by halving when not given.
pub fn cmd_microgrid(args: &MicrogridArgs, out: Option<&Path>) -> i32 {
    match microgrid_inner(args, out) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_CONFIG
        }
    }
}

fn microgrid_inner(args: &MicrogridArgs, out: Option<&Path>) -> Result<i32, String> {
    let out_dir = ensure_out_dir(out, None)?;
    let (unit_params, g) = microgrid_default_params(args.n_units, args.m, args.seed);
    let instance = Arc::new(
        microgrid_instance(args.n_units, args.r_g, &unit_params, g.clone(), args.eps)
            .map_err(|e| format!("microgrid generator: {e}"))?,
    );
    validate_instance(&instance)?;
    let reference = compute_reference(&instance, args.kappa)?;
    let stop = StopRule {
        tol_d: args.tol_d,
        max_iter: args.max_iter,
    };
    let base = StepParams {
        gamma: args.gamma.unwrap_or(1.0),
        kappa: args.kappa,
        rho: args.rho,
        beta: args.beta,
    };
    base.validate().map_err(|e| e.to_string())?;

    let params = match args.gamma {
        Some(gamma) => StepParams { gamma, ..base },
        None => {
            let world = WorldState::zero_init(Arc::clone(&instance));
            let found = find_converging_gamma(
                &world,
                &base,
                &ScheduleModel::synchronous(),
                &reference,
                &stop,
                1.0,
                30,
            )
            .map_err(|e| e.to_string())?;
            let (gamma, _) = found.ok_or("no step size in the halving range converges")?;
            println!("selected gamma={gamma} by halving search");
            StepParams { gamma, ..base }
        }
    };

    let async_model = ScheduleModel::asynchronous(args.p_act, args.p_drop, args.seed);
    async_model.validate().map_err(|e| e.to_string())?;
    let code = write_compare_artifacts(
        &instance,
        &reference,
        &params,
        &async_model,
        &stop,
        &out_dir,
        args.seed,
    )?;

    // Report how well the final points balance the demand.
    for label in ["sync", "async"] {
        let text = fs::read_to_string(out_dir.join(format!("{label}_trace.csv")))
            .map_err(|e| e.to_string())?;
        let last = text.lines().last().unwrap_or("");
        println!("{label} final row: {last}");
    }
    Ok(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_defaults() {
        let text = r#"{
            "version": 1,
            "problem": {"source": "random_quadratic", "n_agents": 3, "local_dim": 2,
                        "constraint_dim": 2, "edge_prob": 0.5, "seed": 4},
            "params": {"gamma": 0.05, "kappa": 1.0, "rho": 1.0, "beta": 0.5}
        }"#;
        let config: RunConfig = serde_json::from_str(text).unwrap();
        assert_eq!(config.version, 1);
        assert_eq!(config.tol_d, 1e-8);
        assert_eq!(config.max_iter, 1_000_000);
        assert!(matches!(config.schedule, ScheduleConfig::Sync));
        let instance = config.build_instance().unwrap();
        assert_eq!(instance.n_agents(), 3);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{
            "version": 1,
            "problem": {"source": "random_quadratic", "n_agents": 3, "local_dim": 2,
                        "constraint_dim": 2, "edge_prob": 0.5, "seed": 4},
            "params": {"gamma": 0.05, "kappa": 1.0, "rho": 1.0, "beta": 0.5},
            "typo_field": 3
        }"#;
        assert!(serde_json::from_str::<RunConfig>(text).is_err());
    }

    #[test]
    fn status_mapping_matches_exit_codes() {
        assert_eq!(status_exit(RunStatus::Converged), EXIT_OK);
        assert_eq!(status_exit(RunStatus::MaxIter), EXIT_MAX_ITER);
        assert_eq!(status_exit(RunStatus::Diverged), EXIT_DIVERGED);
        assert_eq!(
            combine_status(RunStatus::Converged, RunStatus::Diverged),
            RunStatus::Diverged
        );
        assert_eq!(
            combine_status(RunStatus::MaxIter, RunStatus::Converged),
            RunStatus::MaxIter
        );
    }
}
