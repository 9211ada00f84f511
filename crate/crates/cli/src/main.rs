use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use split_hmc_cli::run::stuck_chains;
use split_hmc_cli::{cmd_baseline, cmd_evaluate, cmd_plot, cmd_sample, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "split-hmc", version, about = "Split Hamiltonian Monte Carlo experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HMC schemes of a config.
    Sample {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Worker threads for chains.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the stochastic-gradient baseline of a config.
    Baseline {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score one or more runs on a test CSV.
    Evaluate {
        #[arg(short = 'm', long = "manifest", num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Posterior samples used per scheme, evenly spaced over the chains.
        #[arg(long, default_value_t = 1000)]
        max_samples: usize,
    },
    /// Draw SVG figures from an evaluation report.
    Plot {
        #[arg(short, long)]
        report: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    out.or_else(|| cfg.output.dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass -o or set output.dir".into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sample { config, out, jobs } => ExperimentConfig::load(&config).and_then(|cfg| {
            let dir = out_dir(&cfg, out)?;
            let m = cmd_sample(&cfg, &dir, jobs)?;
            println!("wrote {} ({} schemes)", dir.display(), m.runs.len());
            let stuck = stuck_chains(&m);
            if stuck.is_empty() {
                Ok(())
            } else {
                Err(CliError::Divergence(format!(
                    "chains that diverged on every post-burn proposal: {stuck:?}"
                )))
            }
        }),
        Command::Baseline { config, out, jobs } => ExperimentConfig::load(&config).and_then(|cfg| {
            let dir = out_dir(&cfg, out)?;
            cmd_baseline(&cfg, &dir, jobs)?;
            println!("wrote {}", dir.display());
            Ok(())
        }),
        Command::Evaluate {
            runs,
            test,
            out,
            max_samples,
        } => cmd_evaluate(&runs, &test, &out, max_samples).map(|r| {
            println!("wrote {} ({} entries)", out.display(), r.entries.len());
        }),
        Command::Plot { report, out } => cmd_plot(&report, &out).map(|files| {
            println!("wrote {} figures to {}", files.len(), out.display());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
