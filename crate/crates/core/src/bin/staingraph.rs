//! Command-line front end: generate synthetic datasets, train with
//! stratified cross-validation, evaluate a checkpoint, and emit the
//! explainability reports.
//!
//! Exit codes: 0 success, 1 usage or validation problems, 2 i/o and runtime
//! failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use staingraph::commands::{
    cmd_eval, cmd_explain, cmd_generate, cmd_train, EvalSplit, ModelSettings, SynthTask,
};
use staingraph::synth::SynthSpec;
use staingraph::training::TrainConfig;

#[derive(Parser)]
#[command(
    name = "staingraph",
    about = "Multistain patient-graph attention networks with stain-aware pooling",
    version
)]
struct Cli {
    /// Worker threads for graph building and fold training (1 = sequential).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset on disk.
    Generate(GenerateArgs),
    /// Train with a stratified holdout plus k-fold cross-validation.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a named split.
    Eval(EvalArgs),
    /// Write per-patient attention reports, heatmaps, and traces.
    Explain(ExplainArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    /// Gaussian features with a mean-shifted signal stain for class 1.
    Planted,
    /// Triangles vs hexagons with constant features; topology is the signal.
    Csl,
}

#[derive(Args)]
struct GenerateArgs {
    /// Which synthetic task to generate.
    #[arg(long, value_enum, default_value_t = TaskArg::Planted)]
    task: TaskArg,
    /// Patients per class.
    #[arg(long, default_value_t = 100)]
    patients: usize,
    /// Number of stains (named S0..S{n-1}; S0 carries the signal).
    #[arg(long, default_value_t = 3)]
    stains: usize,
    /// Stains per patient (subset sampling); defaults to all.
    #[arg(long)]
    stains_per_patient: Option<usize>,
    /// Mean shift applied to class-1 signal-stain features.
    #[arg(long, default_value_t = 2.0)]
    signal_strength: f64,
    /// Fraction of signal nodes packed into one spatial blob.
    #[arg(long, default_value_t = 0.6)]
    concentration: f64,
    /// Minimum nodes per slide.
    #[arg(long, default_value_t = 15)]
    nodes_min: usize,
    /// Maximum nodes per slide.
    #[arg(long, default_value_t = 25)]
    nodes_max: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 8)]
    feature_dim: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for manifest and data files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelFlags {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    hidden_dim: usize,
    /// Random-walk positional encoding length (0 disables it).
    #[arg(long, default_value_t = 20)]
    pe_dim: usize,
    #[arg(long, default_value_t = 0.7)]
    pool_ratio: f64,
    #[arg(long, default_value_t = 2)]
    gat_heads: usize,
    #[arg(long, default_value_t = 2)]
    mhsa_heads: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    /// Neighbor count for both graph-construction criteria.
    #[arg(long, default_value_t = 5)]
    knn_k: usize,
}

impl ModelFlags {
    fn settings(&self) -> ModelSettings {
        ModelSettings {
            layers: self.layers,
            hidden_dim: self.hidden_dim,
            pe_dim: self.pe_dim,
            pool_ratio: self.pool_ratio,
            gat_heads: self.gat_heads,
            mhsa_heads: self.mhsa_heads,
            dropout: self.dropout,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value_t = 15)]
    patience: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Holdout test fraction.
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
}

impl TrainFlags {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            max_epochs: self.max_epochs,
            patience: self.patience,
            folds: self.folds,
            holdout_fraction: self.holdout,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest path.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints, histories, and the report.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Holdout,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which patients to evaluate; holdout reconstructs the training split
    /// from --seed/--folds/--holdout.
    #[arg(long, value_enum, default_value_t = SplitArg::Holdout)]
    split: SplitArg,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    /// Output directory for the report.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated patient ids; omit for every patient (which also
    /// writes the per-class aggregate).
    #[arg(long, value_delimiter = ',')]
    patients: Option<Vec<String>>,
    /// Also write a grayscale PGM raster per slide.
    #[arg(long, default_value_t = false)]
    raster: bool,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> staingraph::Result<()> {
    if cli.jobs == 0 {
        return Err(staingraph::Error::Config(
            "--jobs must be at least 1".into(),
        ));
    }
    // Ignore failure when a pool was already installed (tests).
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global();

    match cli.command {
        Command::Generate(args) => {
            let task = match args.task {
                TaskArg::Planted => SynthTask::Planted,
                TaskArg::Csl => SynthTask::Csl,
            };
            let spec = SynthSpec {
                patients_per_class: args.patients,
                stains: (0..args.stains).map(|i| format!("S{i}")).collect(),
                stains_per_patient: args.stains_per_patient,
                nodes_per_slide: (args.nodes_min, args.nodes_max),
                feature_dim: args.feature_dim,
                signal_stain: "S0".into(),
                signal_strength: args.signal_strength,
                cluster_concentration: args.concentration,
                grid_size: 16,
                seed: args.seed,
            };
            if task == SynthTask::Planted {
                spec.validate()?;
            }
            cmd_generate(task, &spec, &args.out)?;
            Ok(())
        }
        Command::Train(args) => {
            let train_config = args.train.config(args.seed);
            cmd_train(
                &args.manifest,
                &args.out,
                args.model.settings(),
                &train_config,
                args.model.knn_k,
                args.seed,
            )?;
            Ok(())
        }
        Command::Eval(args) => {
            let split = match args.split {
                SplitArg::Holdout => EvalSplit::Holdout,
                SplitArg::All => EvalSplit::All,
            };
            let train_config = TrainConfig {
                folds: args.folds,
                holdout_fraction: args.holdout,
                seed: args.seed,
                ..TrainConfig::default()
            };
            cmd_eval(
                &args.manifest,
                &args.checkpoint,
                split,
                &train_config,
                args.seed,
                &args.out,
            )?;
            Ok(())
        }
        Command::Explain(args) => {
            cmd_explain(
                &args.manifest,
                &args.checkpoint,
                args.patients.as_deref(),
                &args.out,
                args.raster,
            )?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::from(0);
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(0),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
