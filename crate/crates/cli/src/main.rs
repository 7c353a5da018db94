use std::path::PathBuf;
use std::process::ExitCode;

use aimrl::NormalizationMode;
use aimrl_cli::{cmd_collect, cmd_compare, cmd_evaluate, cmd_train, EvaluateArgs, Overrides};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aimrl", version, about = "Constrained offline RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args)]
struct Flags {
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the training, dataset and comparison seeds.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Importance-weight clip.
    #[arg(long)]
    clip: Option<f64>,
    /// Importance-sampling normalization: `plain` or `self-normalized`.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<NormalizationMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a mixed policy and write its policy set, trace and summary.
    Train(Common),
    /// Estimate a saved policy set on a dataset.
    Evaluate {
        #[arg(long)]
        policy_set: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Config whose environment enables exact evaluation.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: Flags,
    },
    /// Run every mixer and the myopic baseline on the same seeds.
    Compare(Common),
    /// Log a dataset from the configured environment.
    Collect(Common),
}

fn parse_mode(s: &str) -> Result<NormalizationMode, String> {
    s.parse().map_err(|e: aimrl::Error| e.to_string())
}

impl From<Flags> for Overrides {
    fn from(f: Flags) -> Self {
        Overrides {
            out: f.out,
            seed: f.seed_override,
            clip: f.clip,
            mode: f.mode,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let summary = cmd_train(&c.config, &c.flags.into())?;
            println!(
                "{} target {} ({}), exact {} ({}), peak stored params {}",
                summary.mixer,
                summary.target.measurement,
                summary.target.objective,
                summary.exact.measurement,
                summary.exact.objective,
                summary.peak_stored_params
            );
        }
        Command::Evaluate {
            policy_set,
            dataset,
            config,
            flags,
        } => {
            let args = EvaluateArgs {
                policy_set,
                dataset,
                config,
            };
            let report = cmd_evaluate(&args, &flags.into())?;
            print!("estimate {} (ess {:.1})", report.estimate.x_hat, report.estimate.effective_sample_size);
            match &report.exact {
                Some(exact) => println!(", exact {}", exact.measurement),
                None => println!(),
            }
        }
        Command::Compare(c) => {
            let table = cmd_compare(&c.config, &c.flags.into())?;
            for row in &table.rows {
                println!("seed {} {:<12} exact objective {}", row.seed, row.method, row.exact_objective);
            }
        }
        Command::Collect(c) => {
            let path = cmd_collect(&c.config, &c.flags.into())?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
