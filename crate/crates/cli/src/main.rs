mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "gatecl", version, about = "Gated adaptation of frozen backbones for continual activity recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Flags override values from `--config`.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a backbone and save its best-validation checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from the state saved in `<out>/state`.
        #[arg(long)]
        resume: bool,
        /// Override the epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run every (variant, permutation) pair of an experiment spec.
    Run {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint, overriding the spec's backbone source.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        permutations: Option<usize>,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Check the drift, margin and expressiveness bounds numerically.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Run a single suite: 1 feature drift, 2 logit drift, 3 margin
        /// stability, 4 expressiveness.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        theorem: Option<u8>,
        /// Sample count for the selected suite (or every suite).
        #[arg(long)]
        samples: Option<usize>,
        /// Pretrained checkpoint: also emit per-sample verdicts for a model
        /// trained on the first two subjects of the `--config` experiment data.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Aggregate run records into a table and accuracy trajectories.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory written by `run`.
        run_dir: PathBuf,
    },
}

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    Violation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Violation(_) => 3,
        }
    }
}

pub trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Pretrain { common, resume, epochs } => commands::pretrain(&common, resume, epochs),
        Command::Run {
            common,
            checkpoint,
            permutations,
            variants,
        } => commands::run(&common, checkpoint, permutations, variants),
        Command::Verify {
            common,
            theorem,
            samples,
            checkpoint,
        } => commands::verify(&common, theorem, samples, checkpoint),
        Command::Report { common, run_dir } => commands::report(&common, &run_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(e) => eprintln!("error: {e:#}"),
                Failure::Runtime(e) => eprintln!("failed: {e:#}"),
                Failure::Violation(msg) => eprintln!("violation: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Failure::Usage(anyhow::anyhow!("x")).code(), 1);
        assert_eq!(Failure::Runtime(anyhow::anyhow!("x")).code(), 2);
        assert_eq!(Failure::Violation("x".into()).code(), 3);
    }

    #[test]
    fn every_subcommand_takes_the_shared_flags() {
        for cmd in ["pretrain", "run", "verify", "report"] {
            let mut args = vec!["gatecl", cmd, "--config", "c.json", "--seed", "3", "--jobs", "2", "--out", "o"];
            if cmd == "report" {
                args.push("dir");
            }
            assert!(Cli::try_parse_from(&args).is_ok(), "{cmd}");
        }
    }
}
