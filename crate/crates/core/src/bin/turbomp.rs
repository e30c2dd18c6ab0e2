use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use turbomp::harness::{emit_results, run_experiment, run_sweep, ExperimentConfig, ResultSet, SweepParam};
use turbomp::metrics::threshold_grid;
use turbomp::Error;

#[derive(Parser)]
#[command(
    name = "turbomp",
    version,
    about = "Monte-Carlo runs of turbo message passing for grant-free access"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of trials per point.
    #[arg(long)]
    trials: Option<usize>,
    /// Output path prefix; `.csv` and `.json` are appended.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every SNR point of a configuration.
    Run(Common),
    /// Repeat the configuration over a grid of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of k, n, t, q, m, lambda.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Pooled miss/false-alarm curves over a threshold grid.
    Roc {
        #[command(flatten)]
        common: Common,
        /// Number of evenly spaced thresholds in (0, 1), used when the
        /// configuration lists none.
        #[arg(long, default_value_t = 99)]
        points: usize,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(trials) = common.trials {
        cfg.trials = trials;
    }
    if let Some(out) = &common.out {
        cfg.output = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(results: &ResultSet, cfg: &ExperimentConfig) -> Result<(), Error> {
    println!("sweep_value\tsnr_db\tnmse_db\tpe\tp_miss\tp_false\tlambda_hat");
    for a in &results.aggregates {
        println!(
            "{}\t{}\t{}\t{:.4e}\t{:.4e}\t{:.4e}\t{:.4}",
            a.sweep_value.map_or("-".into(), |v| v.to_string()),
            a.snr_db,
            a.nmse_db.map_or("nan".into(), |v| format!("{v:.2}")),
            a.pe,
            a.p_miss,
            a.p_false,
            a.lambda_hat
        );
    }
    let base = cfg.output.clone().unwrap_or_else(|| PathBuf::from("results"));
    for path in emit_results(results, base)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(common) => {
            let cfg = load(&common)?;
            report(&run_experiment(&cfg)?, &cfg)
        }
        Command::Sweep { common, param, values } => {
            let cfg = load(&common)?;
            report(&run_sweep(&cfg, param, &values)?, &cfg)
        }
        Command::Roc { common, points } => {
            let mut cfg = load(&common)?;
            if cfg.roc_thresholds.is_empty() {
                if points == 0 {
                    return Err(Error::Config("--points must be >= 1".into()));
                }
                cfg.roc_thresholds = threshold_grid(points);
            }
            report(&run_experiment(&cfg)?, &cfg)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
