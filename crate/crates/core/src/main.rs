use std::path::PathBuf;

use clap::{Parser, Subcommand};

use ccopt::cli::{cmd_compare, cmd_microgrid, cmd_run, cmd_verify, MicrogridArgs};

/// Distributed constraint-coupled optimization testbed.
#[derive(Parser)]
#[command(name = "ccopt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config; writes trace.csv,
    /// summary.json, and convergence.svg.
    Run {
        /// Path to the JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Schedule seed (overrides the config's seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the synchronous and asynchronous schedules on one instance and
    /// write combined traces and a two-curve plot.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Certify the configured instance: standing requirements, gossip
    /// spectrum, reconstruction, and the two convergence certificates.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Power-balance showcase: generate the converter instance and compare
    /// both schedules.
    Microgrid {
        /// Number of converter units (the grid agent is added on top).
        #[arg(long, default_value_t = 10)]
        units: usize,
        /// Coupling dimension (power balance rows).
        #[arg(long, default_value_t = 5)]
        dim: usize,
        /// Grid quadratic weight R_g.
        #[arg(long, default_value_t = 0.1)]
        r_g: f64,
        /// Norm smoothing for the converter losses.
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        /// Seed for unit parameters, demand, and the schedule.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Activation probability for the asynchronous leg.
        #[arg(long, default_value_t = 0.5)]
        p_act: f64,
        /// Per-message drop probability for the asynchronous leg.
        #[arg(long, default_value_t = 0.2)]
        p_drop: f64,
        /// Step size; found by halving search when omitted.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        /// Stop once the squared distance to the reference drops below this.
        #[arg(long, default_value_t = 1e-13)]
        tol_d: f64,
        #[arg(long, default_value_t = 1_000_000)]
        max_iter: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, out, seed } => cmd_run(&config, out.as_deref(), seed),
        Command::Compare { config, out, seed } => cmd_compare(&config, out.as_deref(), seed),
        Command::Verify { config, out } => cmd_verify(&config, out.as_deref()),
        Command::Microgrid {
            units,
            dim,
            r_g,
            eps,
            seed,
            p_act,
            p_drop,
            gamma,
            kappa,
            rho,
            beta,
            tol_d,
            max_iter,
            out,
        } => {
            let args = MicrogridArgs {
                n_units: units,
                m: dim,
                r_g,
                eps,
                seed,
                p_act,
                p_drop,
                gamma,
                kappa,
                rho,
                beta,
                tol_d,
                max_iter,
            };
            cmd_microgrid(&args, out.as_deref())
        }
    };
    std::process::exit(code);
}
