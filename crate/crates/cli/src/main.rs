//! `precise` — train, evaluate, sweep, and explain prototype-reservation
//! classifiers from the command line.
//!
//! Exit codes: 0 success, 1 internal failure or failed gradient check,
//! 2 configuration error, 3 data error, 4 numerical abort (non-finite loss).

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use precise_core::checkpoint::CheckpointError;
use precise_core::data::DataError;
use precise_core::explain::ExplainError;
use precise_core::train::TrainError;

use config::Settings;

#[derive(Parser)]
#[command(
    name = "precise",
    version,
    about = "Prototype-reservation classifier: training, evaluation, sweeps, and explanations"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Every config key is also a flag; flags override the `--config` file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Flat key=value config file ('#' comments)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// `synth` or a manifest CSV path
    #[arg(long)]
    data: Option<String>,
    /// Image root for manifest rows (defaults to the manifest's directory)
    #[arg(long)]
    data_dir: Option<String>,
    /// `synth` or a manifest CSV path for the test split
    #[arg(long)]
    test_data: Option<String>,
    #[arg(long)]
    test_data_dir: Option<String>,
    /// Synthetic per-class training counts, e.g. 190,10
    #[arg(long)]
    n_per_class: Option<String>,
    /// Synthetic per-class test counts
    #[arg(long)]
    test_n_per_class: Option<String>,
    /// Synthetic image side length (>= 8)
    #[arg(long)]
    side: Option<String>,
    /// Seed for synthetic data generation
    #[arg(long)]
    data_seed: Option<String>,
    /// Apply per-dataset scalar normalization (true|false)
    #[arg(long)]
    normalize: Option<String>,
    /// Encoder hidden sizes, e.g. 128,64
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    latent_dim: Option<String>,
    #[arg(long)]
    classifier_bias: Option<String>,
    /// Prototypes reserved per class
    #[arg(long)]
    d: Option<String>,
    /// Autoencoder loss coefficient
    #[arg(long)]
    lambda1: Option<String>,
    /// Prototype loss coefficient
    #[arg(long)]
    lambda2: Option<String>,
    /// Prototype loss mode: reserved | unreserved
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    /// Base run seed
    #[arg(long)]
    seed: Option<String>,
    /// Independent runs aggregated as mean +/- std
    #[arg(long)]
    num_seeds: Option<String>,
    /// Stratified training-subset fraction in (0, 1]
    #[arg(long)]
    fraction: Option<String>,
    /// Per-seed worker threads
    #[arg(long)]
    workers: Option<String>,
    /// Training scalar width: f32 | f64
    #[arg(long)]
    precision: Option<String>,
    /// Sweep fractions, e.g. 0.05,0.25,1.0
    #[arg(long)]
    fractions: Option<String>,
    /// Sweep prototype counts, e.g. 1,2,3,4,5
    #[arg(long)]
    d_values: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &String)> {
        let mut out: Vec<(&'static str, &String)> = Vec::new();
        macro_rules! push {
            ($key:literal, $field:ident) => {
                if let Some(v) = &self.$field {
                    out.push(($key, v));
                }
            };
        }
        push!("data", data);
        push!("data-dir", data_dir);
        push!("test-data", test_data);
        push!("test-data-dir", test_data_dir);
        push!("n-per-class", n_per_class);
        push!("test-n-per-class", test_n_per_class);
        push!("side", side);
        push!("data-seed", data_seed);
        push!("normalize", normalize);
        push!("hidden", hidden);
        push!("latent-dim", latent_dim);
        push!("classifier-bias", classifier_bias);
        push!("d", d);
        push!("lambda1", lambda1);
        push!("lambda2", lambda2);
        push!("mode", mode);
        push!("epochs", epochs);
        push!("batch-size", batch_size);
        push!("lr", lr);
        push!("weight-decay", weight_decay);
        push!("seed", seed);
        push!("num-seeds", num_seeds);
        push!("fraction", fraction);
        push!("workers", workers);
        push!("precision", precision);
        push!("fractions", fractions);
        push!("d-values", d_values);
        out
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train (multi-seed) and evaluate; writes checkpoints, loss history,
    /// metrics CSV, and the effective config
    Train(Overrides),
    /// Evaluate a checkpoint on the configured test data
    Eval {
        #[command(flatten)]
        common: Overrides,
        /// Checkpoint produced by `train`
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export decoded prototypes and distance reports for a checkpoint
    Explain {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Query PGM paths (defaults to the whole test set)
        #[arg(long, value_delimiter = ',')]
        queries: Vec<PathBuf>,
    },
    /// Multi-seed runs over training-set fractions
    SweepSubsets(Overrides),
    /// Multi-seed runs over prototypes-per-class counts
    SweepPrototypes(Overrides),
    /// Generate a synthetic dataset as PGM files plus a manifest
    GenSynthetic(Overrides),
    /// Check every autodiff op and the full loss against finite differences
    Gradcheck {
        #[command(flatten)]
        common: Overrides,
        /// Random instances per check
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(DataError),
    Checkpoint(CheckpointError),
    Train(TrainError),
    Explain(ExplainError),
    WriteArtifact(PathBuf, std::io::Error),
    GradcheckFailed(usize),
    Internal(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Data(e) => write!(f, "data: {e}"),
            CliError::Checkpoint(e) => write!(f, "checkpoint: {e}"),
            CliError::Train(e) => write!(f, "training: {e}"),
            CliError::Explain(e) => write!(f, "explain: {e}"),
            CliError::WriteArtifact(p, e) => write!(f, "writing {}: {e}", p.display()),
            CliError::GradcheckFailed(n) => write!(f, "{n} gradient check(s) failed"),
            CliError::Internal(m) => write!(f, "internal: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Checkpoint(e)
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        CliError::Explain(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => CliError::Data(d),
            TrainError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Train(other),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Checkpoint(_) => 3,
            CliError::Train(TrainError::NonFiniteLoss { .. }) => 4,
            _ => 1,
        }
    }
}

/// Defaults, then config file, then flags; echoes the result into `out`.
fn resolve(overrides: &Overrides) -> Result<(Settings, PathBuf), CliError> {
    let mut settings = Settings::default();
    if let Some(path) = &overrides.config {
        settings.apply_file(path).map_err(CliError::Config)?;
    }
    for (key, value) in overrides.pairs() {
        settings.set(key, value).map_err(CliError::Config)?;
    }
    let out = overrides.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::WriteArtifact(out.clone(), e))?;
    let echo_path = out.join("effective-config.txt");
    std::fs::write(&echo_path, settings.echo())
        .map_err(|e| CliError::WriteArtifact(echo_path, e))?;
    Ok((settings, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train(common) => {
            let (settings, out) = resolve(&common)?;
            commands::train(&settings, &out)
        }
        Cmd::Eval { common, checkpoint } => {
            let (settings, out) = resolve(&common)?;
            commands::eval(&settings, &out, &checkpoint)
        }
        Cmd::Explain {
            common,
            checkpoint,
            queries,
        } => {
            let (settings, out) = resolve(&common)?;
            commands::explain(&settings, &out, &checkpoint, &queries)
        }
        Cmd::SweepSubsets(common) => {
            let (settings, out) = resolve(&common)?;
            commands::sweep_subsets(&settings, &out)
        }
        Cmd::SweepPrototypes(common) => {
            let (settings, out) = resolve(&common)?;
            commands::sweep_prototypes(&settings, &out)
        }
        Cmd::GenSynthetic(common) => {
            let (settings, out) = resolve(&common)?;
            commands::gen_synthetic(&settings, &out)
        }
        Cmd::Gradcheck { common, instances } => {
            let (settings, out) = resolve(&common)?;
            commands::gradcheck(&settings, &out, instances)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
