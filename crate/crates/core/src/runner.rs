//! Multi-seed runs and the two sweeps (training-set fraction, prototypes per
//! class), with per-seed worker parallelism and CSV reporting.

use crate::data::{stratified_indices, LabeledDataset, NormStats, SubsetSpec};
use crate::loss::LossBreakdown;
use crate::metrics::{aggregate, evaluate, MetricsReport, SeedMetrics};
use crate::model::{Architecture, PreciseModel};
use crate::scalar::Scalar;
use crate::train::{train, EpochRecord, TrainConfig, TrainError};

/// Default training-set fractions for the data-efficiency sweep.
pub const DEFAULT_FRACTIONS: [f64; 6] = [0.01, 0.05, 0.10, 0.25, 0.50, 1.00];
/// Prototype counts swept per class.
pub const DEFAULT_PROTOTYPE_COUNTS: [usize; 5] = [1, 2, 3, 4, 5];

/// Architecture knobs that do not depend on the dataset.
#[derive(Debug, Clone)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub classifier_bias: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            hidden: vec![128, 64],
            latent_dim: 32,
            classifier_bias: true,
        }
    }
}

impl ArchSpec {
    pub fn build(&self, ds: &LabeledDataset, per_class_prototypes: usize) -> Architecture {
        Architecture {
            width: ds.width,
            height: ds.height,
            hidden: self.hidden.clone(),
            latent_dim: self.latent_dim,
            per_class_prototypes,
            num_classes: ds.num_classes,
            classifier_bias: self.classifier_bias,
        }
    }
}

pub struct SeedOutcome<S: Scalar> {
    pub seed: u64,
    pub model: PreciseModel<S>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<LossBreakdown>,
    pub metrics: SeedMetrics,
    pub stats: Option<NormStats>,
    /// Original-dataset indices of the training subset this seed used.
    pub subset_indices: Vec<usize>,
}

pub struct MultiseedOutcome<S: Scalar> {
    pub seeds: Vec<SeedOutcome<S>>,
    pub report: MetricsReport,
}

/// Runs `f(0..n)` with at most `workers` threads, preserving output order.
pub fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut results: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let mut next = 0;
    while next < n {
        let wave_end = (next + workers).min(n);
        let wave_start = next;
        std::thread::scope(|scope| {
            for (offset, slot) in results[wave_start..wave_end].iter_mut().enumerate() {
                let f = &f;
                scope.spawn(move || {
                    *slot = Some(f(wave_start + offset));
                });
            }
        });
        next = wave_end;
    }
    results
        .into_iter()
        .map(|r| r.expect("worker completed"))
        .collect()
}

/// One seed: stratified subset at the configured fraction, train, evaluate.
/// The subset draw depends only on (data, fraction, seed), never on the
/// prototype mode, so compared modes see identical subsets.
pub fn run_one_seed<S: Scalar>(
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    cfg: &TrainConfig,
    arch_spec: &ArchSpec,
    seed: u64,
) -> Result<SeedOutcome<S>, TrainError> {
    let spec = SubsetSpec {
        fraction: cfg.subset_fraction,
        seed,
    };
    let subset_indices = stratified_indices(train_ds, &spec)?;
    let samples = subset_indices
        .iter()
        .map(|&i| train_ds.samples[i].clone())
        .collect();
    let subset = LabeledDataset::from_samples(
        train_ds.width,
        train_ds.height,
        samples,
        train_ds.provenance,
    )?;
    let arch = arch_spec.build(train_ds, cfg.per_class_prototypes);
    let out = train::<S>(&subset, None, cfg, &arch, seed, None)?;
    let metrics = evaluate(&out.model, test_ds, out.stats.as_ref(), cfg.batch_size)?;
    Ok(SeedOutcome {
        seed,
        model: out.model,
        history: out.history,
        steps: out.steps,
        metrics,
        stats: out.stats,
        subset_indices,
    })
}

/// Seeds `cfg.seed .. cfg.seed + num_seeds`, each trained on its own subset
/// draw, aggregated as mean +/- sample std.
pub fn run_multiseed<S: Scalar>(
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    cfg: &TrainConfig,
    arch_spec: &ArchSpec,
) -> Result<MultiseedOutcome<S>, TrainError> {
    let results = parallel_map(cfg.num_seeds, cfg.workers, |i| {
        run_one_seed::<S>(train_ds, test_ds, cfg, arch_spec, cfg.seed + i as u64)
    });
    let mut seeds = Vec::with_capacity(results.len());
    for r in results {
        seeds.push(r?);
    }
    let report = aggregate(
        seeds.iter().map(|s| (s.seed, s.metrics.clone())).collect(),
        cfg.echo(),
    );
    Ok(MultiseedOutcome { seeds, report })
}

pub fn sweep_subsets<S: Scalar>(
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    cfg: &TrainConfig,
    arch_spec: &ArchSpec,
    fractions: &[f64],
) -> Result<Vec<(f64, MetricsReport)>, TrainError> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut sub_cfg = cfg.clone();
        sub_cfg.subset_fraction = fraction;
        let out = run_multiseed::<S>(train_ds, test_ds, &sub_cfg, arch_spec)?;
        rows.push((fraction, out.report));
    }
    Ok(rows)
}

pub fn sweep_prototypes<S: Scalar>(
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    cfg: &TrainConfig,
    arch_spec: &ArchSpec,
    d_values: &[usize],
) -> Result<Vec<(usize, MetricsReport)>, TrainError> {
    let mut rows = Vec::with_capacity(d_values.len());
    for &d in d_values {
        let mut sub_cfg = cfg.clone();
        sub_cfg.per_class_prototypes = d;
        let out = run_multiseed::<S>(train_ds, test_ds, &sub_cfg, arch_spec)?;
        rows.push((d, out.report));
    }
    Ok(rows)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Results table: one row per seed plus `mean`/`std` aggregate rows.
pub fn results_csv(rows: &[(String, &MetricsReport)], num_classes: usize) -> String {
    let mut out = String::from("fraction_or_d,seed");
    out.push_str(",accuracy,macro_f1");
    for j in 0..num_classes {
        out.push_str(&format!(",acc_class_{j}"));
    }
    out.push('\n');
    for (key, report) in rows {
        for (seed, m) in &report.per_seed {
            out.push_str(&format!("{key},{seed},{},{}", m.accuracy, m.macro_f1));
            for j in 0..num_classes {
                out.push(',');
                out.push_str(&opt_cell(m.per_class_accuracy.get(j).copied().flatten()));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "{key},mean,{},{}",
            report.accuracy_mean, report.macro_f1_mean
        ));
        for j in 0..num_classes {
            out.push(',');
            out.push_str(&opt_cell(report.per_class_mean.get(j).copied().flatten()));
        }
        out.push('\n');
        out.push_str(&format!(
            "{key},std,{},{}",
            report.accuracy_std, report.macro_f1_std
        ));
        for j in 0..num_classes {
            out.push(',');
            out.push_str(&opt_cell(report.per_class_std.get(j).copied().flatten()));
        }
        out.push('\n');
    }
    out
}

/// Per-epoch loss history, with validation accuracy when it was tracked.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out =
        String::from("epoch,total,classification,ae,proto_term1,proto_term2,val_accuracy\n");
    for rec in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            rec.epoch,
            rec.mean.total,
            rec.mean.classification,
            rec.mean.ae,
            rec.mean.proto_term1,
            rec.mean.proto_term2,
            opt_cell(rec.val_accuracy),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::loss::ProtoMode;

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            num_seeds: 3,
            ..TrainConfig::default()
        }
    }

    fn tiny_spec() -> ArchSpec {
        ArchSpec {
            hidden: vec![12],
            latent_dim: 6,
            classifier_bias: true,
        }
    }

    #[test]
    fn parallel_map_preserves_order() {
        let out = parallel_map(7, 3, |i| i * i);
        assert_eq!(out, vec![0, 1, 4, 9, 16, 25, 36]);
        let seq = parallel_map(4, 1, |i| i + 1);
        assert_eq!(seq, vec![1, 2, 3, 4]);
    }

    #[test]
    fn multiseed_aggregates_match_hand_average() {
        let train_ds = gen_synthetic(&[24, 12], 8, 0).unwrap();
        let test_ds = gen_synthetic(&[12, 6], 8, 100).unwrap();
        let out = run_multiseed::<f32>(&train_ds, &test_ds, &quick_cfg(), &tiny_spec()).unwrap();
        assert_eq!(out.seeds.len(), 3);
        let hand: f64 = out.seeds.iter().map(|s| s.metrics.accuracy).sum::<f64>() / 3.0;
        assert!((out.report.accuracy_mean - hand).abs() < 1e-9);
    }

    #[test]
    fn single_seed_reports_zero_std() {
        let train_ds = gen_synthetic(&[16, 8], 8, 1).unwrap();
        let test_ds = gen_synthetic(&[8, 4], 8, 101).unwrap();
        let mut cfg = quick_cfg();
        cfg.num_seeds = 1;
        let out = run_multiseed::<f32>(&train_ds, &test_ds, &cfg, &tiny_spec()).unwrap();
        assert_eq!(out.report.accuracy_std, 0.0);
        assert_eq!(out.report.macro_f1_std, 0.0);
    }

    #[test]
    fn modes_share_subset_draws_per_seed() {
        let train_ds = gen_synthetic(&[30, 10], 8, 2).unwrap();
        let test_ds = gen_synthetic(&[6, 2], 8, 102).unwrap();
        let mut cfg = quick_cfg();
        cfg.subset_fraction = 0.5;
        cfg.num_seeds = 2;
        let reserved = run_multiseed::<f32>(&train_ds, &test_ds, &cfg, &tiny_spec()).unwrap();
        cfg.mode = ProtoMode::Unreserved;
        let unreserved = run_multiseed::<f32>(&train_ds, &test_ds, &cfg, &tiny_spec()).unwrap();
        for (a, b) in reserved.seeds.iter().zip(&unreserved.seeds) {
            assert_eq!(a.subset_indices, b.subset_indices);
        }
    }

    #[test]
    fn workers_do_not_change_results() {
        let train_ds = gen_synthetic(&[16, 8], 8, 3).unwrap();
        let test_ds = gen_synthetic(&[8, 4], 8, 103).unwrap();
        let mut cfg = quick_cfg();
        cfg.num_seeds = 2;
        let seq = run_multiseed::<f32>(&train_ds, &test_ds, &cfg, &tiny_spec()).unwrap();
        cfg.workers = 2;
        let par = run_multiseed::<f32>(&train_ds, &test_ds, &cfg, &tiny_spec()).unwrap();
        assert_eq!(seq.report.accuracy_mean, par.report.accuracy_mean);
        for (a, b) in seq.seeds.iter().zip(&par.seeds) {
            for (x, y) in a.model.params.iter().zip(&b.model.params) {
                assert_eq!(x.values, y.values);
            }
        }
    }

    #[test]
    fn prototype_sweep_scales_the_bank() {
        let train_ds = gen_synthetic(&[10, 10], 8, 4).unwrap();
        let cfg = quick_cfg();
        for d in [1usize, 3] {
            let mut c = cfg.clone();
            c.per_class_prototypes = d;
            let seed_out = run_one_seed::<f32>(&train_ds, &train_ds, &c, &tiny_spec(), 0).unwrap();
            assert_eq!(seed_out.model.prototypes().shape, vec![d * 2, 6]);
        }
    }

    #[test]
    fn degenerate_sweep_equals_a_plain_multiseed_run() {
        let train_ds = gen_synthetic(&[14, 6], 8, 6).unwrap();
        let test_ds = gen_synthetic(&[7, 3], 8, 106).unwrap();
        let mut cfg = quick_cfg();
        cfg.num_seeds = 2;
        let direct = run_multiseed::<f32>(&train_ds, &test_ds, &cfg, &tiny_spec()).unwrap();
        let swept = sweep_subsets::<f32>(&train_ds, &test_ds, &cfg, &tiny_spec(), &[1.0]).unwrap();
        assert_eq!(swept.len(), 1);
        assert_eq!(swept[0].0, 1.0);
        assert_eq!(swept[0].1.accuracy_mean, direct.report.accuracy_mean);
        assert_eq!(swept[0].1.macro_f1_mean, direct.report.macro_f1_mean);
    }

    #[test]
    fn csv_has_per_seed_and_aggregate_rows() {
        let train_ds = gen_synthetic(&[12, 6], 8, 5).unwrap();
        let test_ds = gen_synthetic(&[6, 3], 8, 105).unwrap();
        let mut cfg = quick_cfg();
        cfg.num_seeds = 2;
        let out = run_multiseed::<f32>(&train_ds, &test_ds, &cfg, &tiny_spec()).unwrap();
        let csv = results_csv(&[("1".to_string(), &out.report)], 2);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "fraction_or_d,seed,accuracy,macro_f1,acc_class_0,acc_class_1"
        );
        assert_eq!(lines.len(), 1 + 2 + 2); // header + seeds + mean + std
        assert!(lines[3].starts_with("1,mean,"));
        assert!(lines[4].starts_with("1,std,"));
    }
}
