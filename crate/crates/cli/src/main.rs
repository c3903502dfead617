use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use loco_core::adaptation::{Budget, LabelMode};
use loco_core::config::PipelineConfig;
use loco_core::pipeline::{Manifest, Run};
use loco_core::{Error, ErrorCategory};

const DEFAULT_OUT: &str = "loco-pda-out";

#[derive(Parser)]
#[command(
    name = "loco-pda",
    version,
    about = "Pruned-classifier adaptation from generated activations"
)]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; defaults to `experiment.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: $LOCO_PDA_OUT, then experiment.output_dir, then loco-pda-out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Labels {
    GroundTruth,
    Estimated,
}

impl From<Labels> for LabelMode {
    fn from(l: Labels) -> Self {
        match l {
            Labels::GroundTruth => LabelMode::GroundTruth,
            Labels::Estimated => LabelMode::Estimated,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source train/val sets and one observed stream per scenario.
    SynthData,
    /// Train the deployed model.
    TrainSource,
    /// Prune and finetune a copy of the deployed model.
    Prune,
    /// Write the pruned feature extractor's activations on the training set.
    DumpActivations,
    /// Train the conditional VAE on the dumped activations.
    TrainCvae,
    /// Train one unconditional VAE per class.
    TrainUncond,
    /// Estimate the target label distribution from deployed-model predictions.
    EstimateDomain {
        /// Activation file of raw inputs; every scenario stream when omitted.
        #[arg(long)]
        stream: Option<PathBuf>,
    },
    /// Retrain the pruned classifier on generated activations.
    Adapt {
        #[arg(long, value_enum)]
        labels: Option<Labels>,
    },
    /// Retrain the pruned classifier on stored real activations.
    Baseline {
        /// Storage budget in bytes; unbounded when omitted and not in the config.
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long, value_enum)]
        labels: Option<Labels>,
    },
    /// Verify artifact checksums and score every model.
    Evaluate,
    /// Baseline accuracy across storage budgets.
    SweepBudget {
        #[arg(long, value_enum, default_value = "ground-truth")]
        labels: Labels,
    },
    /// Conditional VAE against the per-class pack.
    CompareUncond,
    /// Static and runtime memory ledgers of both methods.
    MemoryReport,
    /// Certain against noisy labels for both methods.
    NoiseExperiment,
    /// Every stage in order.
    RunAll,
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Usage => 2,
        ErrorCategory::Config => 3,
        ErrorCategory::Format => 4,
        ErrorCategory::Numeric => 5,
        ErrorCategory::MissingDependency => 6,
        ErrorCategory::Io => 7,
    }
}

fn run(cli: Cli) -> Result<Manifest, Error> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let seed = cli.seed.unwrap_or(config.experiment.seed);
    let out = cli
        .out
        .or_else(|| std::env::var_os("LOCO_PDA_OUT").map(PathBuf::from))
        .or_else(|| config.experiment.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let default_mode = config.adaptation.label_mode;
    let config_budget = config.baseline.budget();
    let run = Run::new(config, seed, out)?;
    match cli.command {
        Command::SynthData => run.synth_data(),
        Command::TrainSource => run.train_source(),
        Command::Prune => run.prune(),
        Command::DumpActivations => run.dump_activations(),
        Command::TrainCvae => run.train_cvae(),
        Command::TrainUncond => run.train_uncond(),
        Command::EstimateDomain { stream } => run.estimate_domain(stream.as_deref()),
        Command::Adapt { labels } => run.adapt(labels.map_or(default_mode, Into::into)),
        Command::Baseline { budget, labels } => run.baseline(
            labels.map_or(default_mode, Into::into),
            budget.map_or(config_budget, Budget::Bytes),
        ),
        Command::Evaluate => run.evaluate(),
        Command::SweepBudget { labels } => run.sweep_budget(labels.into()),
        Command::CompareUncond => run.compare_uncond(),
        Command::MemoryReport => run.memory_report(),
        Command::NoiseExperiment => run.noise_experiment(),
        Command::RunAll => run.run_all(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(manifest) => {
            for (path, sum) in &manifest.artifacts {
                println!("{sum}  {path}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error ({:?}): {e}", e.category());
            ExitCode::from(exit_code(e.category()))
        }
    }
}
