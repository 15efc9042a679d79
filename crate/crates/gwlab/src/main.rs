use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gwlab_core::lab::{self, ExperimentConfig, ExperimentId, LabError, MonteCarloSpec, Report};

#[derive(Parser)]
#[command(
    name = "gwlab",
    version,
    about = "Run branching-process experiments from declarative configs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run an experiment from its preset, with optional overrides.
    Verify {
        /// thm1, thm2, corollary, stationarity, tauberian, bell_bound,
        /// integral_lemmas, derivative_lemmas, zubkov or finite_variance
        experiment: String,
        #[command(flatten)]
        common: Common,
        /// Comma-separated generations, e.g. 4096,16384.
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<usize>>,
        /// Relative tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Absolute tolerance.
        #[arg(long)]
        abs_tolerance: Option<f64>,
        /// Monte Carlo replicates (adds a Monte Carlo section where supported).
        #[arg(long)]
        replicates: Option<u64>,
        /// Generation of the Monte Carlo section.
        #[arg(long)]
        mc_n: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(report) => {
            print_report(&report);
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn execute(cli: Cli) -> Result<Report, LabError> {
    let (mut cfg, common) = match cli.command {
        Command::Run { config, common } => (
            ExperimentConfig::from_json(&fs::read_to_string(&config)?)?,
            common,
        ),
        Command::Verify {
            experiment,
            common,
            schedule,
            tolerance,
            abs_tolerance,
            replicates,
            mc_n,
        } => {
            let id = ExperimentId::parse(&experiment).ok_or_else(|| {
                LabError::ConfigInvalid(format!("unknown experiment {experiment:?}"))
            })?;
            let mut cfg = ExperimentConfig::preset(id);
            if let Some(s) = schedule {
                cfg.schedule = s;
            }
            if let Some(t) = tolerance {
                cfg.tolerances.relative = t;
            }
            if let Some(t) = abs_tolerance {
                cfg.tolerances.absolute = t;
            }
            if replicates.is_some() || mc_n.is_some() {
                let base = cfg.monte_carlo.clone();
                cfg.monte_carlo = Some(MonteCarloSpec {
                    n: mc_n.or(base.as_ref().map(|m| m.n)).unwrap_or(4096),
                    replicates: replicates
                        .or(base.as_ref().map(|m| m.replicates))
                        .unwrap_or(1_000_000),
                    conditioning: base.map(|m| m.conditioning).unwrap_or_default(),
                });
            }
            (cfg, common)
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(LabError::ConfigInvalid("--jobs must be positive".into()));
        }
        // ignore a second initialization; the pool is global
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    lab::run(&cfg, common.out.as_deref())
}

fn print_report(report: &Report) {
    println!(
        "{} config_hash={} seed={} ({:.1}s)",
        report.experiment, report.config_hash, report.seed, report.wall_time_secs
    );
    for c in &report.checks {
        let tag = match (c.informational, c.pass) {
            (true, _) => "INFO",
            (false, true) => "PASS",
            (false, false) => "FAIL",
        };
        println!("  {tag} {}: {}", c.name, c.detail);
    }
    println!("{}", if report.pass { "PASS" } else { "FAIL" });
}
