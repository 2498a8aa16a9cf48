mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spartran::{Error, ErrorClass};

#[derive(Debug, Parser)]
#[command(name = "spartran", version, about = "Sparse radio-channel pretraining runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Flat key = value run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scene and write a dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Label groups with beam indices from a codebook of this size.
        #[arg(long)]
        codebook_size: Option<usize>,
    },
    /// Pretrain encoder and sparse head on the links of a dataset.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        atoms: Option<usize>,
    },
    /// Train a downstream head on a labeled dataset.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        /// Expected beam codebook size of the dataset labels.
        #[arg(long)]
        codebook_size: Option<usize>,
    },
    /// Score a checkpoint on a dataset and write metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Dump the sparse decomposition of one link as CSV.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Link index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Coherence statistics of a checkpoint's or a configured sinc dictionary.
    DictReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        atoms: Option<usize>,
    },
    /// Check the preconditioning bound on coefficient vectors from a CSV.
    ThmCheck {
        #[command(flatten)]
        common: Common,
        /// One comma-separated coefficient vector per line.
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated 0-based indices of the boosted set.
        #[arg(long, value_delimiter = ',', required = true)]
        support: Vec<usize>,
        #[arg(long)]
        c: f64,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn report(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = serde_json::json!({
        "error": kind,
        "message": message.split_whitespace().collect::<Vec<_>>().join(" "),
    });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("SPARTRAN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SPARTRAN_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::GenData { common, codebook_size } => commands::gen_data(&common, codebook_size),
        Command::Pretrain {
            common,
            dataset,
            lambda,
            atoms,
        } => commands::pretrain(&common, &dataset, lambda, atoms),
        Command::Finetune {
            common,
            checkpoint,
            dataset,
            fraction,
            codebook_size,
        } => commands::finetune(&common, &checkpoint, &dataset, fraction, codebook_size),
        Command::Eval {
            common,
            checkpoint,
            dataset,
        } => commands::eval(&common, &checkpoint, &dataset),
        Command::Decompose {
            common,
            checkpoint,
            dataset,
            index,
        } => commands::decompose(&common, &checkpoint, &dataset, index),
        Command::DictReport {
            common,
            checkpoint,
            atoms,
        } => commands::dict_report(&common, checkpoint.as_deref(), atoms),
        Command::ThmCheck {
            common,
            input,
            support,
            c,
        } => commands::thm_check(&common, &input, &support, c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report("usage", &e.to_string(), 2),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            let kind = match class {
                ErrorClass::Usage => "usage",
                ErrorClass::Data => "data",
                ErrorClass::Numeric => "numeric",
            };
            report(kind, &e.to_string(), exit_code(class))
        }
    }
}
