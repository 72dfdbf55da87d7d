//! Subcommand implementations.

use std::path::{Path, PathBuf};

use precise_core::checkpoint::{self, CheckpointMeta, Loaded};
use precise_core::data::{gen_synthetic as synth, DataError, LabeledDataset, Provenance, Sample};
use precise_core::explain::{
    averages_csv, class_average_distances, distance_report, export_prototypes, report_csv,
};
use precise_core::gradcheck::{full_suite, suite_passed, SuiteConfig};
use precise_core::metrics::{aggregate, evaluate};
use precise_core::model::PreciseModel;
use precise_core::pgm::read_pgm;
use precise_core::rng::mix;
use precise_core::runner::{
    history_csv, results_csv, run_multiseed, sweep_prototypes as core_sweep_d,
    sweep_subsets as core_sweep_fractions,
};
use precise_core::scalar::{Scalar, ScalarWidth};

use crate::config::{DataSource, Settings};
use crate::CliError;

const TEST_SPLIT_SALT: u64 = 0x7E57;

/// Status output that survives a closed stdout (e.g. piping into `head`)
/// instead of panicking; artifacts are the real product, the chatter is not.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content).map_err(|e| CliError::WriteArtifact(path.to_path_buf(), e))
}

fn load_source(
    source: &DataSource,
    dir: Option<&Path>,
    n_per_class: &[usize],
    side: usize,
    seed: u64,
) -> Result<LabeledDataset, CliError> {
    match source {
        DataSource::Synth => Ok(synth(n_per_class, side, seed)?),
        DataSource::Manifest(manifest) => {
            let root = dir
                .map(Path::to_path_buf)
                .or_else(|| manifest.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from("."));
            Ok(LabeledDataset::load_manifest(&root, manifest)?)
        }
    }
}

fn load_train_data(s: &Settings) -> Result<LabeledDataset, CliError> {
    load_source(
        &s.data,
        s.data_dir.as_deref(),
        &s.n_per_class,
        s.side,
        s.data_seed,
    )
}

fn load_test_data(s: &Settings) -> Result<LabeledDataset, CliError> {
    load_source(
        &s.test_data,
        s.test_data_dir.as_deref(),
        &s.test_n_per_class,
        s.side,
        mix(s.data_seed, TEST_SPLIT_SALT),
    )
}

// ── train ───────────────────────────────────────────────────────────

pub fn train(s: &Settings, out: &Path) -> Result<(), CliError> {
    let train_ds = load_train_data(s)?;
    let test_ds = load_test_data(s)?;
    match s.precision {
        ScalarWidth::F32 => train_as::<f32>(s, out, &train_ds, &test_ds),
        ScalarWidth::F64 => train_as::<f64>(s, out, &train_ds, &test_ds),
    }
}

fn train_as<S: Scalar>(
    s: &Settings,
    out: &Path,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
) -> Result<(), CliError> {
    let cfg = s.train_config();
    let arch_spec = s.arch_spec();
    let result = run_multiseed::<S>(train_ds, test_ds, &cfg, &arch_spec)?;
    for seed_out in &result.seeds {
        let meta = CheckpointMeta {
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            mode: cfg.mode,
            train_seed: seed_out.seed,
            norm: seed_out.stats,
        };
        let ckpt = out.join(format!("checkpoint_seed{}.ckpt", seed_out.seed));
        checkpoint::save(&ckpt, &seed_out.model, &meta)?;
        write_file(
            &out.join(format!("loss_history_seed{}.csv", seed_out.seed)),
            &history_csv(&seed_out.history),
        )?;
    }
    let csv = results_csv(
        &[(cfg.subset_fraction.to_string(), &result.report)],
        test_ds.num_classes,
    );
    write_file(&out.join("metrics.csv"), &csv)?;
    say!(
        "trained {} seed(s) [{} mode, fraction {}]: accuracy {:.2} +/- {:.2}, macro F1 {:.2} +/- {:.2}",
        cfg.num_seeds,
        cfg.mode,
        cfg.subset_fraction,
        result.report.accuracy_mean,
        result.report.accuracy_std,
        result.report.macro_f1_mean,
        result.report.macro_f1_std,
    );
    say!("artifacts in {}", out.display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────

pub fn eval(s: &Settings, out: &Path, ckpt: &Path) -> Result<(), CliError> {
    let test_ds = load_test_data(s)?;
    let (csv, accuracy, f1) = match checkpoint::load(ckpt)? {
        Loaded::F32(model, meta) => eval_as(s, &model, &meta, &test_ds)?,
        Loaded::F64(model, meta) => eval_as(s, &model, &meta, &test_ds)?,
    };
    write_file(&out.join("metrics.csv"), &csv)?;
    say!("accuracy {accuracy:.4}, macro F1 {f1:.4}");
    Ok(())
}

fn eval_as<S: Scalar>(
    s: &Settings,
    model: &PreciseModel<S>,
    meta: &CheckpointMeta,
    test_ds: &LabeledDataset,
) -> Result<(String, f64, f64), CliError> {
    let metrics = evaluate(model, test_ds, meta.norm.as_ref(), s.batch_size)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let (accuracy, f1) = (metrics.accuracy, metrics.macro_f1);
    let echo = format!(
        "checkpoint lambda1={} lambda2={} mode={} train_seed={}",
        meta.lambda1, meta.lambda2, meta.mode, meta.train_seed
    );
    let report = aggregate(vec![(meta.train_seed, metrics)], echo);
    let csv = results_csv(&[("eval".to_string(), &report)], test_ds.num_classes);
    Ok((csv, accuracy, f1))
}

// ── explain ─────────────────────────────────────────────────────────

pub fn explain(s: &Settings, out: &Path, ckpt: &Path, queries: &[PathBuf]) -> Result<(), CliError> {
    let test_ds = load_test_data(s)?;
    match checkpoint::load(ckpt)? {
        Loaded::F32(model, meta) => explain_as(s, out, &model, &meta, &test_ds, queries),
        Loaded::F64(model, meta) => explain_as(s, out, &model, &meta, &test_ds, queries),
    }
}

/// Loads explicit query images, checking extents against the model.
fn load_queries(
    paths: &[PathBuf],
    width: usize,
    height: usize,
) -> Result<(LabeledDataset, Vec<String>), CliError> {
    let mut samples = Vec::with_capacity(paths.len());
    let mut names = Vec::with_capacity(paths.len());
    for p in paths {
        let img = read_pgm(p)?;
        if img.width != width || img.height != height {
            return Err(CliError::Data(DataError::InconsistentDimensions {
                path: p.clone(),
                width: img.width,
                height: img.height,
                want_w: width,
                want_h: height,
            }));
        }
        let scale = 1.0 / img.maxval as f64;
        samples.push(Sample {
            pixels: img.data.iter().map(|&b| b as f64 * scale).collect(),
            label: 0,
        });
        names.push(p.display().to_string());
    }
    let ds = LabeledDataset::from_samples(width, height, samples, Provenance::Manifest)?;
    Ok((ds, names))
}

fn explain_as<S: Scalar>(
    _s: &Settings,
    out: &Path,
    model: &PreciseModel<S>,
    meta: &CheckpointMeta,
    test_ds: &LabeledDataset,
    queries: &[PathBuf],
) -> Result<(), CliError> {
    let proto_dir = out.join("prototypes");
    let files = export_prototypes(model, &proto_dir)?;
    say!(
        "wrote {} prototype image(s) to {}",
        files.len(),
        proto_dir.display()
    );

    let stats = meta.norm;
    let report = if queries.is_empty() {
        distance_report(model, test_ds, None, stats.as_ref())?
    } else {
        let (qds, names) = load_queries(queries, model.arch.width, model.arch.height)?;
        distance_report(model, &qds, Some(&names), stats.as_ref())?
    };
    write_file(&out.join("distance_report.csv"), &report_csv(&report))?;

    let averages = class_average_distances(model, test_ds, stats.as_ref())?;
    write_file(
        &out.join("class_average_distances.csv"),
        &averages_csv(&averages),
    )?;
    say!(
        "distance report: {} row(s); class-average matrix over {} classes",
        report.rows.len(),
        averages.num_classes
    );
    Ok(())
}

// ── sweeps ──────────────────────────────────────────────────────────

pub fn sweep_subsets(s: &Settings, out: &Path) -> Result<(), CliError> {
    let train_ds = load_train_data(s)?;
    let test_ds = load_test_data(s)?;
    let cfg = s.train_config();
    let arch_spec = s.arch_spec();
    let rows = match s.precision {
        ScalarWidth::F32 => {
            core_sweep_fractions::<f32>(&train_ds, &test_ds, &cfg, &arch_spec, &s.fractions)?
        }
        ScalarWidth::F64 => {
            core_sweep_fractions::<f64>(&train_ds, &test_ds, &cfg, &arch_spec, &s.fractions)?
        }
    };
    let keyed: Vec<(String, &precise_core::MetricsReport)> =
        rows.iter().map(|(f, r)| (f.to_string(), r)).collect();
    write_file(
        &out.join("sweep_subsets.csv"),
        &results_csv(&keyed, test_ds.num_classes),
    )?;
    for (fraction, report) in &rows {
        say!(
            "fraction {fraction}: accuracy {:.2} +/- {:.2}",
            report.accuracy_mean, report.accuracy_std
        );
    }
    Ok(())
}

pub fn sweep_prototypes(s: &Settings, out: &Path) -> Result<(), CliError> {
    let train_ds = load_train_data(s)?;
    let test_ds = load_test_data(s)?;
    let cfg = s.train_config();
    let arch_spec = s.arch_spec();
    let rows = match s.precision {
        ScalarWidth::F32 => {
            core_sweep_d::<f32>(&train_ds, &test_ds, &cfg, &arch_spec, &s.d_values)?
        }
        ScalarWidth::F64 => {
            core_sweep_d::<f64>(&train_ds, &test_ds, &cfg, &arch_spec, &s.d_values)?
        }
    };
    let keyed: Vec<(String, &precise_core::MetricsReport)> =
        rows.iter().map(|(d, r)| (d.to_string(), r)).collect();
    write_file(
        &out.join("sweep_prototypes.csv"),
        &results_csv(&keyed, test_ds.num_classes),
    )?;
    for (d, report) in &rows {
        say!(
            "d={d}: accuracy {:.2} +/- {:.2}",
            report.accuracy_mean, report.accuracy_std
        );
    }
    Ok(())
}

// ── gen-synthetic ───────────────────────────────────────────────────

pub fn gen_synthetic(s: &Settings, out: &Path) -> Result<(), CliError> {
    let ds = synth(&s.n_per_class, s.side, s.data_seed)?;
    let manifest = ds.export(out)?;
    say!(
        "wrote {} image(s) ({} classes, counts {:?}) and {}",
        ds.len(),
        ds.num_classes,
        ds.class_counts,
        manifest.display()
    );
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────

pub fn gradcheck(s: &Settings, out: &Path, instances: usize) -> Result<(), CliError> {
    let cfg = SuiteConfig {
        instances,
        seed: s.seed,
        eps: 1e-6,
    };
    let outcomes = full_suite(&cfg).map_err(|e| CliError::Internal(e.to_string()))?;
    let mut report = String::new();
    for o in &outcomes {
        say!("{}", o.line());
        report.push_str(&o.line());
        report.push('\n');
    }
    let failures = outcomes.iter().filter(|o| !o.passed).count();
    let summary = format!(
        "{}: {} checks, {} failed ({} instances each, eps {:e})",
        if failures == 0 { "PASS" } else { "FAIL" },
        outcomes.len(),
        failures,
        instances,
        cfg.eps
    );
    say!("{summary}");
    report.push_str(&summary);
    report.push('\n');
    write_file(&out.join("gradcheck_report.txt"), &report)?;
    if !suite_passed(&outcomes) {
        return Err(CliError::GradcheckFailed(failures));
    }
    Ok(())
}
