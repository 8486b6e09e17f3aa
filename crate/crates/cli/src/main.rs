use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use textshield_cli::commands;
use textshield_cli::config::ExperimentConfig;
use textshield_cli::CliError;

#[derive(Parser)]
#[command(
    name = "textshield",
    about = "Train text classifiers, attack them with synonym substitutions, and defend them with saliency-based detection and correction"
)]
struct Cli {
    /// Path to the TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblateMode {
    #[value(name = "beta_sweep")]
    BetaSweep,
    #[value(name = "k_sweep")]
    KSweep,
    #[value(name = "drop_subdetector")]
    DropSubdetector,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus, lexicon, and embedding files.
    GenData,
    /// Train the victim classifier.
    TrainVictim,
    /// Generate adversarial corpora for detector training and evaluation.
    GenAdv,
    /// Build detection data and train the detector plus both baselines.
    TrainDetector,
    /// Report detection F1/recall per attack for all three detectors.
    EvalDetection,
    /// Report clean and adversarial accuracy with and without the defense.
    EvalDefense,
    /// Run one ablation: the beta sweep, the K sweep, or sub-detector drops.
    Ablate {
        #[arg(long, value_enum)]
        mode: AblateMode,
    },
    /// Collect metric rows into CSV tables and a JSON bundle.
    Report,
    /// Classify one sentence through the defense and print the audit record.
    Defend {
        #[arg(long)]
        text: String,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => commands::cmd_gen_data(&cfg),
        Command::TrainVictim => commands::cmd_train_victim(&cfg),
        Command::GenAdv => commands::cmd_gen_adv(&cfg),
        Command::TrainDetector => commands::cmd_train_detector(&cfg),
        Command::EvalDetection => commands::cmd_eval_detection(&cfg),
        Command::EvalDefense => commands::cmd_eval_defense(&cfg),
        Command::Ablate { mode } => match mode {
            AblateMode::BetaSweep => commands::cmd_ablate_beta(&cfg),
            AblateMode::KSweep => commands::cmd_ablate_k(&cfg),
            AblateMode::DropSubdetector => commands::cmd_ablate_drop(&cfg),
        },
        Command::Report => commands::cmd_report(&cfg),
        Command::Defend { text } => commands::cmd_defend_one(&cfg, text),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
