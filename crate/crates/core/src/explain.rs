//! The model's native explanations: prototypes decoded back to viewable
//! images, per-image prototype-distance reports, and the class-average
//! distance matrix.
//!
//! Faithfulness invariant: a report row is the same buffer the linear head
//! consumed for that image, widened losslessly to f64. There is no separate
//! recomputation path.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{batches, DataError, LabeledDataset, NormStats};
use crate::metrics::argmax;
use crate::model::{PreciseModel, PrototypeLayout};
use crate::pgm::write_pgm;
use crate::scalar::Scalar;
use crate::tape::TapeError;

#[derive(Error, Debug)]
pub enum ExplainError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone)]
pub struct DistanceRow {
    pub image: String,
    pub label: Option<usize>,
    pub predicted: usize,
    pub nearest_prototype: usize,
    /// Distance to every prototype, ordered by prototype index
    /// (class-blocked). Exact f64 widening of the classifier's input.
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExplainReport {
    pub layout: PrototypeLayout,
    pub rows: Vec<DistanceRow>,
}

/// `rows[a][b]` = mean distance of class-`a` test images to the prototypes
/// reserved for class `b`; `None` when class `a` has no test images.
#[derive(Debug, Clone)]
pub struct ClassAverages {
    pub num_classes: usize,
    pub rows: Vec<Option<Vec<f64>>>,
}

impl ClassAverages {
    /// Diagonal strictly smaller than every off-diagonal entry of its row,
    /// over the rows that exist.
    pub fn row_diagonally_dominant(&self) -> bool {
        self.rows.iter().enumerate().all(|(a, row)| match row {
            None => true,
            Some(r) => r.iter().enumerate().all(|(b, &v)| b == a || r[a] < v),
        })
    }
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Decodes every prototype to the input space and writes
/// `proto_{class}_{slot}.pgm` files (slot = index within the class block).
pub fn export_prototypes<S: Scalar>(
    model: &PreciseModel<S>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ExplainError> {
    std::fs::create_dir_all(out_dir).map_err(|e| DataError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let layout = model.arch.layout();
    let m = layout.count();
    let decoded = model.decode_values(&model.prototypes().values, m)?;
    let pixels = model.arch.pixels();
    let mut paths = Vec::with_capacity(m);
    for k in 0..m {
        let class = layout.class_of(k);
        let slot = k - layout.reserved(class).start;
        let bytes: Vec<u8> = decoded[k * pixels..(k + 1) * pixels]
            .iter()
            .map(|&v| (v.to_f64().clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
            .collect();
        let path = out_dir.join(format!("proto_{class}_{slot}.pgm"));
        write_pgm(&path, model.arch.width, model.arch.height, &bytes)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Distance rows for every query image. `names`, when given, labels the rows
/// (defaults to `img_{i}`).
pub fn distance_report<S: Scalar>(
    model: &PreciseModel<S>,
    queries: &LabeledDataset,
    names: Option<&[String]>,
    stats: Option<&NormStats>,
) -> Result<ExplainReport, ExplainError> {
    let layout = model.arch.layout();
    let m = layout.count();
    let n_classes = model.arch.num_classes;
    let mut rows = Vec::with_capacity(queries.len());
    let mut index = 0usize;
    for batch in batches::<S>(queries, 64, 0, 0, false, stats) {
        let fv = model.run_forward(&batch.x, batch.len())?;
        for i in 0..batch.len() {
            let distances: Vec<f64> = fv.distances[i * m..(i + 1) * m]
                .iter()
                .map(|&d| d.to_f64())
                .collect();
            let predicted = argmax(&fv.probs[i * n_classes..(i + 1) * n_classes]);
            rows.push(DistanceRow {
                image: names
                    .and_then(|ns| ns.get(index).cloned())
                    .unwrap_or_else(|| format!("img_{index}")),
                label: Some(batch.labels[i]),
                predicted,
                nearest_prototype: argmin(&distances),
                distances,
            });
            index += 1;
        }
    }
    Ok(ExplainReport { layout, rows })
}

/// N x N matrix: entry (a, b) averages, over class-`a` images, the mean
/// distance to the class-`b` prototype block.
pub fn class_average_distances<S: Scalar>(
    model: &PreciseModel<S>,
    ds: &LabeledDataset,
    stats: Option<&NormStats>,
) -> Result<ClassAverages, ExplainError> {
    let layout = model.arch.layout();
    let m = layout.count();
    let n_classes = model.arch.num_classes;
    let mut sums = vec![vec![0.0f64; m]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for batch in batches::<S>(ds, 64, 0, 0, false, stats) {
        let fv = model.run_forward(&batch.x, batch.len())?;
        for i in 0..batch.len() {
            let class = batch.labels[i];
            counts[class] += 1;
            for k in 0..m {
                sums[class][k] += fv.distances[i * m + k].to_f64();
            }
        }
    }
    let rows = (0..n_classes)
        .map(|a| {
            if counts[a] == 0 {
                return None;
            }
            Some(
                (0..n_classes)
                    .map(|b| {
                        let block = layout.reserved(b);
                        let block_len = block.len();
                        let total: f64 = block.map(|k| sums[a][k]).sum();
                        total / (counts[a] * block_len) as f64
                    })
                    .collect(),
            )
        })
        .collect();
    Ok(ClassAverages {
        num_classes: n_classes,
        rows,
    })
}

/// CSV with one column pair (owning class, distance) per prototype.
pub fn report_csv(report: &ExplainReport) -> String {
    let m = report.layout.count();
    let mut out = String::from("image,pred");
    for k in 0..m {
        out.push_str(&format!(",proto_{k}_class,proto_{k}_dist"));
    }
    out.push('\n');
    for row in &report.rows {
        out.push_str(&format!("{},{}", row.image, row.predicted));
        for k in 0..m {
            out.push_str(&format!(
                ",{},{}",
                report.layout.class_of(k),
                row.distances[k]
            ));
        }
        out.push('\n');
    }
    out
}

/// CSV of the class-average matrix with class labels on both axes.
pub fn averages_csv(avg: &ClassAverages) -> String {
    let mut out = String::from("class");
    for b in 0..avg.num_classes {
        out.push_str(&format!(",proto_class_{b}"));
    }
    out.push('\n');
    for (a, row) in avg.rows.iter().enumerate() {
        if let Some(r) = row {
            out.push_str(&a.to_string());
            for v in r {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    out
}
