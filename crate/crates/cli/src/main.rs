//! Command line pipeline around the adversarial-artifact toolkit. Each
//! subcommand runs one stage against an output directory and records its
//! seeds and inputs in a manifest.

mod config;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::Config;
use stages::Ctx;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("pipeline: {0}")]
    Pipeline(String),
}

impl From<advartifact::Error> for CliError {
    fn from(e: advartifact::Error) -> Self {
        CliError::Pipeline(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Pipeline(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Pipeline(_) => "pipeline",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AttackArg {
    Fgsm,
    BimA,
    BimB,
    Jsma,
    Cw,
}

impl AttackArg {
    /// Canonical attack name as used in configs and output files.
    fn canonical(self) -> &'static str {
        match self {
            AttackArg::Fgsm => "fgsm",
            AttackArg::BimA => "bim-a",
            AttackArg::BimB => "bim-b",
            AttackArg::Jsma => "jsma",
            AttackArg::Cw => "cw-l0",
        }
    }
}

#[derive(Parser)]
#[command(name = "advartifact", version, about = "Adversarial sample detection pipeline")]
struct Cli {
    /// Pipeline configuration file
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Output directory for models, attack batches, and reports
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Master seed override
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Restrict attack-dependent stages to one attack
    #[arg(long, value_enum)]
    attack: Option<AttackArg>,

    /// Log stage progress to stderr
    #[arg(long)]
    verbose: bool,

    #[command(subcommand)]
    stage: Stage,
}

#[derive(Subcommand)]
enum Stage {
    /// Train the classifier and report accuracy
    Train,
    /// Craft adversarial samples and noisy counterparts
    Attack,
    /// Extract uncertainty and density features
    Features,
    /// Train the logistic-regression detector
    Detect,
    /// Compute ROC curves and the summary report
    Evaluate,
    /// Measure undecided rates under an uncertainty cutoff
    Undecided,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (config, config_hash) = Config::load(&cli.config)?;
    let attack_filter = cli.attack.map(|a| a.canonical().to_string());
    if let Some(name) = &attack_filter {
        if !config.attacks.iter().any(|k| k.name() == name) {
            return Err(CliError::Config(format!(
                "attack {name} is not in the configured attack list"
            )));
        }
    }
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(config.seed),
        config,
        config_hash,
        out: cli.out,
        attack_filter,
        verbose: cli.verbose,
    };
    match cli.stage {
        Stage::Train => stages::train_stage(&ctx),
        Stage::Attack => stages::attack_stage(&ctx),
        Stage::Features => stages::features_stage(&ctx),
        Stage::Detect => stages::detect_stage(&ctx),
        Stage::Evaluate => stages::evaluate_stage(&ctx),
        Stage::Undecided => stages::undecided_stage(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one machine-readable record on stderr per failed run
            let record = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            ExitCode::from(e.exit_code())
        }
    }
}
