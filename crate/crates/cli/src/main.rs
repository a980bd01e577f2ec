use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use uqbench::data::load_fixture;
use uqbench_cli::gradcheck::{run_gradcheck, GradcheckOptions};
use uqbench_cli::metrics_cmd::{run_metrics, MetricsRequest};
use uqbench_cli::{run_experiment, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "uqbench", version, about = "Benchmark approximate Bayesian inference on toy problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// 1024-model ensemble pool, 10 MC-dropout repeats, full-length
        /// SG-MCMC and M up to 256.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Evaluate metrics on a prediction fixture CSV.
    Metrics {
        fixture: PathBuf,
        #[arg(long)]
        ause: bool,
        #[arg(long)]
        auce: bool,
        /// Expected calibration error with this many bins.
        #[arg(long, value_name = "L")]
        ece: Option<usize>,
        #[arg(long)]
        rmse: bool,
        /// Fractions in the sparsification curves.
        #[arg(long)]
        steps: Option<usize>,
        /// Directory for metrics.csv and curve files (default: next to the fixture).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        flip_sign: bool,
    },
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            jobs,
            paper_scale,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if paper_scale {
                cfg = cfg.paper_scale();
                cfg.validate()?;
            }
            let out_dir = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("uqbench-out"));
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.unwrap_or(0))
                .build()
                .map_err(|e| CliError::runtime("thread pool", e))?;
            let summary = pool.install(|| run_experiment(&cfg, &out_dir))?;
            print!("{}", std::fs::read_to_string(summary.out_dir.join("report.csv"))?);
            info!("wrote {}", summary.out_dir.display());
            Ok(true)
        }
        Command::Metrics {
            fixture,
            ause,
            auce,
            ece,
            rmse,
            steps,
            out,
        } => {
            let data = load_fixture(&fixture).map_err(|e| CliError::Validation(format!("{}: {e}", fixture.display())))?;
            let out_dir = out.unwrap_or_else(|| {
                let stem = fixture.file_stem().map_or("fixture".into(), |s| s.to_string_lossy().into_owned());
                fixture.with_file_name(format!("{stem}-metrics"))
            });
            let request = MetricsRequest {
                ause,
                auce,
                ece,
                rmse,
                steps,
            };
            let outcome = run_metrics(&data, &request, &out_dir)?;
            print!("{}", outcome.to_text());
            Ok(true)
        }
        Command::Gradcheck { seed, flip_sign } => {
            let report = run_gradcheck(&GradcheckOptions {
                seed,
                flip_sign,
                ..GradcheckOptions::default()
            })?;
            print!("{}", report.to_text());
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
