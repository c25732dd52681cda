use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voxloc::experiment::{cmd_analyze, cmd_generate, cmd_run, parse_modes, ExperimentConfig};
use voxloc::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_PARTIAL: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "voxloc", version, about = "Phantom localization experiments with sampling-based uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom cohort and its manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Cohort directory (overrides `cohort_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of cases (overrides `cohort.n_cases`).
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Run the pipeline and uncertainty modes over a cohort.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of baseline,mcdo,tta,hybrid.
        #[arg(long)]
        modes: Option<String>,
        /// Cohort directory (overrides `cohort_dir`).
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Whisker rejection analysis of a results table.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Results table; defaults to `<out_dir>/results.csv` from the config.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Report directory; defaults to the results table's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Generate { common, out, cases } => {
            let mut cfg = load(&common)?;
            if let Some(o) = out {
                cfg.cohort_dir = o;
            }
            if let Some(n) = cases {
                cfg.cohort.n_cases = n;
            }
            let manifest = cmd_generate(&cfg)?;
            let hard = manifest.cases.iter().filter(|c| c.hard).count();
            println!(
                "generated {} cases ({hard} hard) in {} [config {} seed {}]",
                manifest.cases.len(),
                cfg.cohort_dir.display(),
                manifest.config_hash,
                manifest.seed
            );
            Ok(0)
        }
        Command::Run { common, modes, cohort, out } => {
            let mut cfg = load(&common)?;
            if let Some(m) = modes {
                cfg.modes = parse_modes(&m)?;
            }
            if let Some(c) = cohort {
                cfg.cohort_dir = c;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let outcome = cmd_run(&cfg)?;
            println!("wrote {} rows to {}", outcome.rows.len(), outcome.results_path.display());
            if outcome.is_partial_failure() {
                eprintln!("failed cases: {}", outcome.failed_cases.join(", "));
                return Ok(EXIT_PARTIAL);
            }
            Ok(0)
        }
        Command::Analyze { common, results, out } => {
            let cfg = load(&common)?;
            let results = results.unwrap_or_else(|| cfg.results_path());
            let out = out.unwrap_or_else(|| results.parent().map(PathBuf::from).unwrap_or_default());
            let report = cmd_analyze(&results, &out)?;
            for m in &report.modes {
                let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.3}"));
                println!(
                    "{:<8} n={:<4} median={:.3} fence={:.3} flagged={:<3} recall={} precision={}",
                    m.mode,
                    m.n,
                    m.stats.median,
                    m.stats.upper_fence,
                    m.flagged.len(),
                    fmt(m.recall),
                    fmt(m.precision)
                );
            }
            for s in &report.skipped_modes {
                println!("{s:<8} skipped (fewer than 4 rows)");
            }
            Ok(0)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Csv(c) if c.is_io_error() => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
