//! `mitosis` command-line tool: dataset preparation, training, tiled
//! inference, evaluation and cross-validation.
//!
//! Every command accepts `--seed`, `--config <file>` and `--out <dir>`. The
//! effective configuration is built from defaults, then the JSON config file,
//! then flags, and is written to `<out>/run_manifest.json` with checksums of
//! every input read.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mitosis_core::dataset::{OptimizerKind, Task, TrainingProfile};
use mitosis_core::Error as CoreError;

pub mod commands;
pub mod config;

#[derive(Debug, Parser)]
#[command(name = "mitosis", version, about = "Mitotic figure detection and classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic annotated dataset.
    Synth(commands::synth::SynthArgs),
    /// Extract labelled patches and write image-level splits.
    Prepare(commands::prepare::PrepareArgs),
    /// Train the first-stage detector.
    TrainDetector(commands::train::TrainDetectorArgs),
    /// Train a patch classifier or an ensemble of them.
    TrainClassifier(commands::train::TrainClassifierArgs),
    /// Run the detector, optionally followed by the classifier, over images.
    Infer(commands::infer::InferArgs),
    /// Score predictions against ground-truth points.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// K-fold cross-validation of the patch classifier.
    Crossval(commands::crossval::CrossvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Seed for every random choice of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file overriding the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl CommonArgs {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    /// Mitotic figure versus impostor, used to refine detector candidates.
    Refine,
    /// Atypical versus normal mitotic figure.
    Atypical,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Refine => Task::RefineCls,
            TaskArg::Atypical => Task::AtypicalCls,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

/// Training-profile overrides shared by the training commands.
#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// Disable training-time augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

impl ProfileArgs {
    pub fn apply(&self, p: &mut TrainingProfile) {
        if let Some(e) = self.epochs {
            p.epochs = e;
        }
        if let Some(b) = self.batch_size {
            p.batch_size = b;
        }
        if let Some(lr) = self.lr {
            p.learning_rate = lr;
        }
        if let Some(o) = self.optimizer {
            p.optimizer = match o {
                OptimizerArg::Adam => OptimizerKind::Adam,
                OptimizerArg::Sgd => OptimizerKind::Sgd,
            };
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth::run(&a),
        Command::Prepare(a) => commands::prepare::run(&a),
        Command::TrainDetector(a) => commands::train::run_detector(&a),
        Command::TrainClassifier(a) => commands::train::run_classifier(&a),
        Command::Infer(a) => commands::infer::run(&a),
        Command::Evaluate(a) => commands::evaluate::run(&a),
        Command::Crossval(a) => commands::crossval::run(&a),
    }
}

/// Process exit code for a failed run: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>().map(CoreError::root) {
        Some(CoreError::Config(_)) => 2,
        Some(CoreError::Numeric(_)) => 4,
        Some(_) => 3,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None if err.downcast_ref::<serde_json::Error>().is_some() => 3,
        None => 1,
    }
}
