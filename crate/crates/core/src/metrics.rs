//! Evaluation: overall accuracy, classwise accuracy, and macro F1, plus
//! multi-seed aggregation with sample standard deviations.

use crate::data::{batches, LabeledDataset, NormStats};
use crate::model::PreciseModel;
use crate::scalar::Scalar;
use crate::tape::TapeResult;

/// Metrics of a single trained model on one test set. Accuracies and F1 are
/// percentages; a class absent from the test set reports `None`.
#[derive(Debug, Clone)]
pub struct SeedMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true_class][predicted_class]`
    pub confusion: Vec<Vec<usize>>,
}

/// Mean and sample std over per-seed metrics, plus the configuration the
/// runs were produced with.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub per_seed: Vec<(u64, SeedMetrics)>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub per_class_mean: Vec<Option<f64>>,
    pub per_class_std: Vec<Option<f64>>,
    pub config_echo: String,
}

/// Argmax with ties resolved to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per sample, batched, deterministic.
pub fn predictions<S: Scalar>(
    model: &PreciseModel<S>,
    ds: &LabeledDataset,
    stats: Option<&NormStats>,
    batch_size: usize,
) -> TapeResult<Vec<usize>> {
    let n_classes = model.arch.num_classes;
    let mut preds = Vec::with_capacity(ds.len());
    for batch in batches::<S>(ds, batch_size, 0, 0, false, stats) {
        let fv = model.run_forward(&batch.x, batch.len())?;
        for i in 0..batch.len() {
            preds.push(argmax(&fv.probs[i * n_classes..(i + 1) * n_classes]));
        }
    }
    Ok(preds)
}

pub fn evaluate<S: Scalar>(
    model: &PreciseModel<S>,
    ds: &LabeledDataset,
    stats: Option<&NormStats>,
    batch_size: usize,
) -> TapeResult<SeedMetrics> {
    let n_classes = model.arch.num_classes.max(ds.num_classes);
    let preds = predictions(model, ds, stats, batch_size)?;
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut cursor = 0;
    for batch in batches::<S>(ds, batch_size, 0, 0, false, stats) {
        for &label in &batch.labels {
            confusion[label][preds[cursor]] += 1;
            cursor += 1;
        }
    }
    Ok(metrics_from_confusion(&confusion))
}

/// Pure metric arithmetic, shared by evaluation and tests.
pub fn metrics_from_confusion(confusion: &[Vec<usize>]) -> SeedMetrics {
    let n_classes = confusion.len();
    let total: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
    let correct: usize = (0..n_classes).map(|j| confusion[j][j]).sum();
    let accuracy = 100.0 * correct as f64 / total as f64;

    let mut per_class_accuracy = Vec::with_capacity(n_classes);
    let mut f1_sum = 0.0;
    let mut f1_classes = 0usize;
    for j in 0..n_classes {
        let row_total: usize = confusion[j].iter().sum();
        if row_total == 0 {
            per_class_accuracy.push(None);
            continue;
        }
        per_class_accuracy.push(Some(100.0 * confusion[j][j] as f64 / row_total as f64));
        let tp = confusion[j][j];
        let fn_ = row_total - tp;
        let fp: usize = (0..n_classes)
            .filter(|&a| a != j)
            .map(|a| confusion[a][j])
            .sum();
        let denom = 2 * tp + fp + fn_;
        // 0/0 convention: no predictions and no positives scores 0
        let f1 = if denom == 0 {
            0.0
        } else {
            100.0 * 2.0 * tp as f64 / denom as f64
        };
        f1_sum += f1;
        f1_classes += 1;
    }
    let macro_f1 = if f1_classes == 0 {
        0.0
    } else {
        f1_sum / f1_classes as f64
    };
    SeedMetrics {
        accuracy,
        macro_f1,
        per_class_accuracy,
        confusion: confusion.to_vec(),
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    (mean, std)
}

pub fn aggregate(per_seed: Vec<(u64, SeedMetrics)>, config_echo: String) -> MetricsReport {
    assert!(!per_seed.is_empty(), "aggregate needs at least one seed");
    let accs: Vec<f64> = per_seed.iter().map(|(_, m)| m.accuracy).collect();
    let f1s: Vec<f64> = per_seed.iter().map(|(_, m)| m.macro_f1).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&accs);
    let (macro_f1_mean, macro_f1_std) = mean_std(&f1s);

    let n_classes = per_seed
        .iter()
        .map(|(_, m)| m.per_class_accuracy.len())
        .max()
        .unwrap_or(0);
    let mut per_class_mean = Vec::with_capacity(n_classes);
    let mut per_class_std = Vec::with_capacity(n_classes);
    for j in 0..n_classes {
        let present: Vec<f64> = per_seed
            .iter()
            .filter_map(|(_, m)| m.per_class_accuracy.get(j).copied().flatten())
            .collect();
        if present.is_empty() {
            per_class_mean.push(None);
            per_class_std.push(None);
        } else {
            let (m, s) = mean_std(&present);
            per_class_mean.push(Some(m));
            per_class_std.push(Some(s));
        }
    }
    MetricsReport {
        per_seed,
        accuracy_mean,
        accuracy_std,
        macro_f1_mean,
        macro_f1_std,
        per_class_mean,
        per_class_std,
        config_echo,
    }
}
