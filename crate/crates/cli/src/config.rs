//! Flat key=value configuration: defaults, optional config file, then flag
//! overrides, echoed back canonically for provenance. Unknown keys are
//! rejected; every echoed file parses back to the same settings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use precise_core::runner::ArchSpec;
use precise_core::scalar::ScalarWidth;
use precise_core::train::TrainConfig;
use precise_core::ProtoMode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Manifest(PathBuf),
}

impl DataSource {
    fn parse(v: &str) -> DataSource {
        if v == "synth" {
            DataSource::Synth
        } else {
            DataSource::Manifest(PathBuf::from(v))
        }
    }

    fn echo(&self) -> String {
        match self {
            DataSource::Synth => "synth".into(),
            DataSource::Manifest(p) => p.display().to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    // data
    pub data: DataSource,
    pub data_dir: Option<PathBuf>,
    pub test_data: DataSource,
    pub test_data_dir: Option<PathBuf>,
    pub n_per_class: Vec<usize>,
    pub test_n_per_class: Vec<usize>,
    pub side: usize,
    pub data_seed: u64,
    pub normalize: bool,
    // architecture
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub classifier_bias: bool,
    pub d: usize,
    // objective
    pub lambda1: f64,
    pub lambda2: f64,
    pub mode: ProtoMode,
    // optimization
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    // runs
    pub seed: u64,
    pub num_seeds: usize,
    pub fraction: f64,
    pub workers: usize,
    pub precision: ScalarWidth,
    // sweeps
    pub fractions: Vec<f64>,
    pub d_values: Vec<usize>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            data: DataSource::Synth,
            data_dir: None,
            test_data: DataSource::Synth,
            test_data_dir: None,
            n_per_class: vec![190, 10],
            test_n_per_class: vec![95, 5],
            side: 16,
            data_seed: 7,
            normalize: true,
            hidden: vec![128, 64],
            latent_dim: 32,
            classifier_bias: true,
            d: 2,
            lambda1: 1.0,
            lambda2: 0.001,
            mode: ProtoMode::Reserved,
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            num_seeds: 3,
            fraction: 1.0,
            workers: 1,
            precision: ScalarWidth::F32,
            fractions: vec![0.01, 0.05, 0.10, 0.25, 0.50, 1.00],
            d_values: vec![1, 2, 3, 4, 5],
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|_| format!("{key}: bad list element `{t}`"))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse::<T>()
        .map_err(|_| format!("{key}: bad value `{v}`"))
}

fn list_echo<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl Settings {
    /// Applies one key=value pair; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "data" => self.data = DataSource::parse(value),
            "data-dir" => {
                self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "test-data" => self.test_data = DataSource::parse(value),
            "test-data-dir" => {
                self.test_data_dir = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "n-per-class" => self.n_per_class = parse_list(key, value)?,
            "test-n-per-class" => self.test_n_per_class = parse_list(key, value)?,
            "side" => self.side = parse_one(key, value)?,
            "data-seed" => self.data_seed = parse_one(key, value)?,
            "normalize" => self.normalize = parse_one(key, value)?,
            "hidden" => self.hidden = parse_list(key, value)?,
            "latent-dim" => self.latent_dim = parse_one(key, value)?,
            "classifier-bias" => self.classifier_bias = parse_one(key, value)?,
            "d" => self.d = parse_one(key, value)?,
            "lambda1" => self.lambda1 = parse_one(key, value)?,
            "lambda2" => self.lambda2 = parse_one(key, value)?,
            "mode" => self.mode = value.parse::<ProtoMode>()?,
            "epochs" => self.epochs = parse_one(key, value)?,
            "batch-size" => self.batch_size = parse_one(key, value)?,
            "lr" => self.lr = parse_one(key, value)?,
            "weight-decay" => self.weight_decay = parse_one(key, value)?,
            "seed" => self.seed = parse_one(key, value)?,
            "num-seeds" => self.num_seeds = parse_one(key, value)?,
            "fraction" => self.fraction = parse_one(key, value)?,
            "workers" => self.workers = parse_one(key, value)?,
            "precision" => {
                self.precision = ScalarWidth::parse(value)
                    .ok_or_else(|| format!("precision: expected f32|f64, got `{value}`"))?;
            }
            "fractions" => self.fractions = parse_list(key, value)?,
            "d-values" => self.d_values = parse_list(key, value)?,
            other => return Err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    /// Loads a `key=value` file (`#` comments, blank lines allowed).
    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?;
        }
        Ok(())
    }

    /// Canonical echo; parsing this back yields identical settings.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# effective configuration");
        let _ = writeln!(s, "data={}", self.data.echo());
        let _ = writeln!(
            s,
            "data-dir={}",
            self.data_dir
                .as_deref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        let _ = writeln!(s, "test-data={}", self.test_data.echo());
        let _ = writeln!(
            s,
            "test-data-dir={}",
            self.test_data_dir
                .as_deref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        let _ = writeln!(s, "n-per-class={}", list_echo(&self.n_per_class));
        let _ = writeln!(s, "test-n-per-class={}", list_echo(&self.test_n_per_class));
        let _ = writeln!(s, "side={}", self.side);
        let _ = writeln!(s, "data-seed={}", self.data_seed);
        let _ = writeln!(s, "normalize={}", self.normalize);
        let _ = writeln!(s, "hidden={}", list_echo(&self.hidden));
        let _ = writeln!(s, "latent-dim={}", self.latent_dim);
        let _ = writeln!(s, "classifier-bias={}", self.classifier_bias);
        let _ = writeln!(s, "d={}", self.d);
        let _ = writeln!(s, "lambda1={}", self.lambda1);
        let _ = writeln!(s, "lambda2={}", self.lambda2);
        let _ = writeln!(s, "mode={}", self.mode);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch-size={}", self.batch_size);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "weight-decay={}", self.weight_decay);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "num-seeds={}", self.num_seeds);
        let _ = writeln!(s, "fraction={}", self.fraction);
        let _ = writeln!(s, "workers={}", self.workers);
        let _ = writeln!(s, "precision={}", self.precision.name());
        let _ = writeln!(s, "fractions={}", list_echo(&self.fractions));
        let _ = writeln!(s, "d-values={}", list_echo(&self.d_values));
        s
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            per_class_prototypes: self.d,
            mode: self.mode,
            num_seeds: self.num_seeds,
            seed: self.seed,
            subset_fraction: self.fraction,
            normalize: self.normalize,
            workers: self.workers,
        }
    }

    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec {
            hidden: self.hidden.clone(),
            latent_dim: self.latent_dim,
            classifier_bias: self.classifier_bias,
        }
    }
}
