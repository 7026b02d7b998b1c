//! rgenima command-line interface.
//!
//! `rgenima <subcommand> --config <path> [--seed <u64>] [--out <dir>]`
//! Exit codes: 0 ok, 2 parse error, 3 config error, 4 empty result,
//! 5 missing artifact.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rgenima::config::RunConfig;
use rgenima::pipeline::{self, PipelineError};

#[derive(Parser)]
#[command(name = "rgenima", version, about = "ROI-wise imaging-genetics pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Sectioned key=value run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<String>,
    /// Worker thread count (0 = automatic). Outputs never depend on it.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort (volumes, patch sets, genotypes).
    Synth(Common),
    /// Run SNP quality control over the cohort genotypes.
    Qc(Common),
    /// Build augmented train/test datasets.
    Dataset(Common),
    /// Two-stage model training.
    Train(Common),
    /// Evaluate the checkpoint on the test dataset.
    Eval(Common),
    /// Attention-rollout ROI-gene attribution.
    Attribute(Common),
    /// Bootstrap stability tables and stable feature selection.
    Stability(Common),
    /// Fisher enrichment of stable genes against the reference set.
    Enrich(Common),
    /// Manhattan-style plot data export.
    Plotdata(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(c)
            | Command::Qc(c)
            | Command::Dataset(c)
            | Command::Train(c)
            | Command::Eval(c)
            | Command::Attribute(c)
            | Command::Stability(c)
            | Command::Enrich(c)
            | Command::Plotdata(c) => c,
        }
    }
}

fn run() -> Result<(), PipelineError> {
    let cli = Cli::parse();
    let common = cli.command.common();
    let mut cfg =
        RunConfig::load(&common.config).map_err(|e| PipelineError::Parse(e.to_string()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if common.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads)
            .build_global()
            .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Synth(_) => pipeline::cmd_synth(&cfg),
        Command::Qc(_) => pipeline::cmd_qc(&cfg),
        Command::Dataset(_) => pipeline::cmd_dataset(&cfg),
        Command::Train(_) => pipeline::cmd_train(&cfg),
        Command::Eval(_) => pipeline::cmd_eval(&cfg),
        Command::Attribute(_) => pipeline::cmd_attribute(&cfg),
        Command::Stability(_) => pipeline::cmd_stability(&cfg),
        Command::Enrich(_) => pipeline::cmd_enrich(&cfg),
        Command::Plotdata(_) => pipeline::cmd_plotdata(&cfg),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rgenima: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
