//! Dataset ingestion, synthetic generation, stratified subsetting, scalar
//! normalization, and deterministic epoch batching.

use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::pgm;
use crate::rng::{mix, rng_from};
use crate::scalar::Scalar;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{path}: malformed PGM ({reason})")]
    MalformedPgm { path: PathBuf, reason: String },
    #[error("{path}: {width}x{height} does not match dataset extents {want_w}x{want_h}")]
    InconsistentDimensions {
        path: PathBuf,
        width: usize,
        height: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("manifest {path} line {line}: {reason}")]
    BadManifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("normalization needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("subset fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("invalid extents: {0}")]
    InvalidExtent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    Manifest,
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// Raw pixels in [0, 1], row-major.
    pub pixels: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub class_counts: Vec<usize>,
    pub provenance: Provenance,
}

/// Scalar mean/std over every pixel of a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SubsetSpec {
    pub fraction: f64,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// One sample's pixels, optionally normalized, converted to `S`.
    pub fn sample_pixels<S: Scalar>(&self, index: usize, stats: Option<&NormStats>) -> Vec<S> {
        self.samples[index]
            .pixels
            .iter()
            .map(|&v| S::from_f64(stats.map_or(v, |st| st.apply(v))))
            .collect()
    }

    /// Builds a dataset from samples, computing class counts. Every class in
    /// `[0, max_label]` must be populated.
    pub fn from_samples(
        width: usize,
        height: usize,
        samples: Vec<Sample>,
        provenance: Provenance,
    ) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::InvalidExtent("empty dataset".into()));
        }
        let num_classes = samples.iter().map(|s| s.label).max().unwrap() + 1;
        let mut class_counts = vec![0usize; num_classes];
        for s in &samples {
            class_counts[s.label] += 1;
        }
        if let Some(class) = class_counts.iter().position(|&c| c == 0) {
            return Err(DataError::EmptyClass(class));
        }
        Ok(LabeledDataset {
            width,
            height,
            samples,
            num_classes,
            class_counts,
            provenance,
        })
    }

    /// Loads a `path,label` CSV manifest of PGM images rooted at `dir`.
    /// Sample order is manifest order.
    pub fn load_manifest(dir: &Path, manifest: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(manifest).map_err(|e| DataError::Io {
            path: manifest.to_path_buf(),
            source: e,
        })?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "path,label" => {}
            _ => {
                return Err(DataError::BadManifest {
                    path: manifest.to_path_buf(),
                    line: 1,
                    reason: "expected header `path,label`".into(),
                })
            }
        }
        let mut samples = Vec::new();
        let mut extents: Option<(usize, usize)> = None;
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (rel, label) = line
                .rsplit_once(',')
                .ok_or_else(|| DataError::BadManifest {
                    path: manifest.to_path_buf(),
                    line: i + 1,
                    reason: "expected `relative-path,label-index`".into(),
                })?;
            let label: usize = label.trim().parse().map_err(|_| DataError::BadManifest {
                path: manifest.to_path_buf(),
                line: i + 1,
                reason: format!("bad label `{label}`"),
            })?;
            let img_path = dir.join(rel.trim());
            let img = pgm::read_pgm(&img_path)?;
            match extents {
                None => extents = Some((img.width, img.height)),
                Some((w, h)) if (w, h) != (img.width, img.height) => {
                    return Err(DataError::InconsistentDimensions {
                        path: img_path,
                        width: img.width,
                        height: img.height,
                        want_w: w,
                        want_h: h,
                    })
                }
                _ => {}
            }
            let scale = 1.0 / img.maxval as f64;
            samples.push(Sample {
                pixels: img.data.iter().map(|&b| b as f64 * scale).collect(),
                label,
            });
        }
        let (width, height) = extents.ok_or_else(|| DataError::BadManifest {
            path: manifest.to_path_buf(),
            line: 1,
            reason: "manifest has no rows".into(),
        })?;
        Self::from_samples(width, height, samples, Provenance::Manifest)
    }

    /// Writes every sample as a PGM plus a manifest CSV; returns the manifest
    /// path. Pixels are quantized round-half-up to 0..=255.
    pub fn export(&self, dir: &Path) -> Result<PathBuf, DataError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let mut manifest = String::from("path,label\n");
        for (i, s) in self.samples.iter().enumerate() {
            let name = format!("img_{i:05}.pgm");
            let bytes: Vec<u8> = s
                .pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
                .collect();
            pgm::write_pgm(&dir.join(&name), self.width, self.height, &bytes)?;
            manifest.push_str(&format!("{name},{}\n", s.label));
        }
        let manifest_path = dir.join("manifest.csv");
        std::fs::write(&manifest_path, manifest).map_err(|e| DataError::Io {
            path: manifest_path.clone(),
            source: e,
        })?;
        Ok(manifest_path)
    }

    /// Dataset with the same labels and normalized pixels.
    pub fn normalized(&self, stats: &NormStats) -> LabeledDataset {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                pixels: s.pixels.iter().map(|&v| stats.apply(v)).collect(),
                label: s.label,
            })
            .collect();
        LabeledDataset {
            samples,
            ..self.clone()
        }
    }
}

/// Synthetic separable grayscale classes on a noisy background:
/// class 0 a centered disc, class 1 two vertical bands, class j >= 2 lights
/// up j+1 corners. At most 4 classes.
pub fn gen_synthetic(
    n_per_class: &[usize],
    side: usize,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    if side < 8 {
        return Err(DataError::InvalidExtent(format!("side {side} < 8")));
    }
    if n_per_class.is_empty() || n_per_class.len() > 4 {
        return Err(DataError::InvalidExtent(format!(
            "need 1..=4 classes, got {}",
            n_per_class.len()
        )));
    }
    if n_per_class.contains(&0) {
        return Err(DataError::InvalidExtent(
            "every class needs >= 1 sample".into(),
        ));
    }

    let mut rng = rng_from(mix(seed, 0x5EED));
    let noise = Normal::new(0.0f64, 0.1).expect("valid normal");
    let mut samples = Vec::new();
    for (class, &count) in n_per_class.iter().enumerate() {
        let mask = pattern_mask(class, side);
        for _ in 0..count {
            let mut pixels = Vec::with_capacity(side * side);
            for (p, &lit) in mask.iter().enumerate() {
                let _ = p;
                let base = 0.15 + noise.sample(&mut rng);
                let v = if lit { base + 0.7 } else { base };
                pixels.push(v.clamp(0.0, 1.0));
            }
            samples.push(Sample {
                pixels,
                label: class,
            });
        }
    }
    LabeledDataset::from_samples(side, side, samples, Provenance::Synthetic)
}

fn pattern_mask(class: usize, side: usize) -> Vec<bool> {
    let mut mask = vec![false; side * side];
    match class {
        0 => {
            let c = (side as f64 - 1.0) / 2.0;
            let r2 = (side as f64 / 4.0).powi(2);
            for row in 0..side {
                for col in 0..side {
                    let dy = row as f64 - c;
                    let dx = col as f64 - c;
                    mask[row * side + col] = dy * dy + dx * dx <= r2;
                }
            }
        }
        1 => {
            let half = (side / 16).max(1);
            let centers = [side / 4, 3 * side / 4];
            for row in 0..side {
                for col in 0..side {
                    let lit = centers.iter().any(|&c| col + half >= c && col <= c + half);
                    mask[row * side + col] = lit;
                }
            }
        }
        _ => {
            // corners TL, TR, BL, BR; class j lights the first j+1
            let q = side / 4;
            let corners = [(0, 0), (0, side - q), (side - q, 0), (side - q, side - q)];
            for &(r0, c0) in corners.iter().take(class + 1) {
                for row in r0..r0 + q {
                    for col in c0..c0 + q {
                        mask[row * side + col] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Indices a stratified subset would keep: per-class uniform sampling
/// without replacement at `max(1, round(fraction * n_j))`, sorted so dataset
/// order is preserved.
pub fn stratified_indices(ds: &LabeledDataset, spec: &SubsetSpec) -> Result<Vec<usize>, DataError> {
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(DataError::BadFraction(spec.fraction));
    }
    let mut rng = rng_from(mix(spec.seed, 0x5B5E7));
    let mut chosen = Vec::new();
    for class in 0..ds.num_classes {
        let members = ds.class_indices(class);
        // round-half-up, floored at 1 so minority classes survive
        let target = ((spec.fraction * members.len() as f64 + 0.5).floor() as usize)
            .max(1)
            .min(members.len());
        let picks = rand::seq::index::sample(&mut rng, members.len(), target);
        chosen.extend(picks.iter().map(|i| members[i]));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn stratified_subset(
    ds: &LabeledDataset,
    spec: &SubsetSpec,
) -> Result<LabeledDataset, DataError> {
    let chosen = stratified_indices(ds, spec)?;
    let samples = chosen.iter().map(|&i| ds.samples[i].clone()).collect();
    LabeledDataset::from_samples(ds.width, ds.height, samples, ds.provenance)
}

/// Welford pass over every pixel; std floored at 1e-6.
pub fn normalization_stats(ds: &LabeledDataset) -> Result<NormStats, DataError> {
    if ds.len() < 2 {
        return Err(DataError::TooFewSamples(ds.len()));
    }
    let mut count = 0u64;
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for s in &ds.samples {
        for &v in &s.pixels {
            count += 1;
            let delta = v - mean;
            mean += delta / count as f64;
            m2 += delta * (v - mean);
        }
    }
    let std = (m2 / count as f64).sqrt().max(1e-6);
    Ok(NormStats { mean, std })
}

pub struct Batch<S: Scalar> {
    /// `[len x pixels]`, row-major, normalized when stats were supplied.
    pub x: Vec<S>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub struct Batches<'a, S: Scalar> {
    ds: &'a LabeledDataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    stats: Option<NormStats>,
    _scalar: PhantomData<S>,
}

/// One epoch of batches. The shuffle is deterministic under
/// `(seed, epoch)`; with `shuffle` off the dataset order is kept. The final
/// partial batch is emitted.
pub fn batches<'a, S: Scalar>(
    ds: &'a LabeledDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
    stats: Option<&NormStats>,
) -> Batches<'a, S> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        let mut rng = rng_from(mix(seed, mix(0xEB0C, epoch)));
        // Fisher-Yates, kept explicit so the order depends only on our seeds
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
    }
    Batches {
        ds,
        order,
        batch_size,
        cursor: 0,
        stats: stats.copied(),
        _scalar: PhantomData,
    }
}

impl<S: Scalar> Iterator for Batches<'_, S> {
    type Item = Batch<S>;

    fn next(&mut self) -> Option<Batch<S>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let mut x = Vec::with_capacity(idx.len() * self.ds.pixels());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend(self.ds.sample_pixels::<S>(i, self.stats.as_ref()));
            labels.push(self.ds.samples[i].label);
        }
        Some(Batch { x, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_determinism() {
        let ds = gen_synthetic(&[95, 5], 16, 3).unwrap();
        assert_eq!(ds.class_counts, vec![95, 5]);
        assert_eq!(ds.len(), 100);
        let again = gen_synthetic(&[95, 5], 16, 3).unwrap();
        for (a, b) in ds.samples.iter().zip(&again.samples) {
            assert_eq!(a.pixels, b.pixels);
            assert_eq!(a.label, b.label);
        }
        let other = gen_synthetic(&[95, 5], 16, 4).unwrap();
        assert_ne!(ds.samples[0].pixels, other.samples[0].pixels);
    }

    #[test]
    fn synthetic_pixels_stay_in_unit_interval() {
        let ds = gen_synthetic(&[10, 10, 10, 10], 8, 11).unwrap();
        for s in &ds.samples {
            assert!(s.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn synthetic_classes_are_nearest_neighbor_separable() {
        // leave-one-out 1-NN in pixel space must exceed 90%
        let ds = gen_synthetic(&[50, 50], 16, 42).unwrap();
        let mut correct = 0;
        for i in 0..ds.len() {
            let mut best = (f64::INFINITY, 0usize);
            for j in 0..ds.len() {
                if i == j {
                    continue;
                }
                let d: f64 = ds.samples[i]
                    .pixels
                    .iter()
                    .zip(&ds.samples[j].pixels)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, ds.samples[j].label);
                }
            }
            if best.1 == ds.samples[i].label {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc > 0.9, "1-NN accuracy {acc}");
    }

    #[test]
    fn invalid_synthetic_extents_are_rejected() {
        assert!(gen_synthetic(&[5, 5], 4, 0).is_err());
        assert!(gen_synthetic(&[], 16, 0).is_err());
        assert!(gen_synthetic(&[1, 0], 16, 0).is_err());
        assert!(gen_synthetic(&[1; 5], 16, 0).is_err());
    }

    #[test]
    fn subset_identity_at_full_fraction() {
        let ds = gen_synthetic(&[20, 10], 8, 1).unwrap();
        let sub = stratified_subset(
            &ds,
            &SubsetSpec {
                fraction: 1.0,
                seed: 9,
            },
        )
        .unwrap();
        assert_eq!(sub.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(&sub.samples) {
            assert_eq!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn subset_rounding_arithmetic() {
        let ds = gen_synthetic(&[90, 10], 8, 2).unwrap();
        let sub = stratified_subset(
            &ds,
            &SubsetSpec {
                fraction: 0.1,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(sub.class_counts, vec![9, 1]);

        // chest-x-ray-scale imbalance at 1%: 39 + 13 = 52 samples
        let big = gen_synthetic(&[3883, 1349], 8, 5).unwrap();
        let sub = stratified_subset(
            &big,
            &SubsetSpec {
                fraction: 0.01,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(sub.class_counts, vec![39, 13]);
        assert_eq!(sub.len(), 52);
    }

    #[test]
    fn subset_keeps_every_class_alive_and_is_seeded() {
        let ds = gen_synthetic(&[200, 7], 8, 3).unwrap();
        let a = stratified_subset(
            &ds,
            &SubsetSpec {
                fraction: 0.01,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(a.class_counts, vec![2, 1]);
        let b = stratified_subset(
            &ds,
            &SubsetSpec {
                fraction: 0.01,
                seed: 1,
            },
        )
        .unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.pixels, y.pixels);
        }
        let c = stratified_subset(
            &ds,
            &SubsetSpec {
                fraction: 0.5,
                seed: 2,
            },
        )
        .unwrap();
        let d = stratified_subset(
            &ds,
            &SubsetSpec {
                fraction: 0.5,
                seed: 3,
            },
        )
        .unwrap();
        let same = c
            .samples
            .iter()
            .zip(&d.samples)
            .all(|(x, y)| x.pixels == y.pixels);
        assert!(!same, "disjoint seeds should draw different subsets");
    }

    #[test]
    fn batch_sizes_partition_the_dataset() {
        let ds = gen_synthetic(&[6, 4], 8, 7).unwrap();
        let sizes: Vec<usize> = batches::<f64>(&ds, 4, 0, 0, true, None)
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        // unshuffled order is dataset order
        let first = batches::<f64>(&ds, 3, 0, 0, false, None).next().unwrap();
        assert_eq!(first.labels, vec![0, 0, 0]);
        assert_eq!(&first.x[..ds.pixels()], ds.samples[0].pixels.as_slice());
    }

    #[test]
    fn epoch_batches_cover_each_sample_exactly_once() {
        let ds = gen_synthetic(&[9, 5], 8, 8).unwrap();
        let mut seen = vec![0usize; ds.len()];
        for b in batches::<f64>(&ds, 4, 123, 2, true, None) {
            for k in 0..b.len() {
                let pix = &b.x[k * ds.pixels()..(k + 1) * ds.pixels()];
                let idx = ds
                    .samples
                    .iter()
                    .position(|s| s.pixels == pix)
                    .expect("batch row must come from the dataset");
                seen[idx] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn shuffle_is_deterministic_per_seed_and_epoch() {
        let ds = gen_synthetic(&[12, 4], 8, 9).unwrap();
        let collect = |seed, epoch| -> Vec<usize> {
            batches::<f64>(&ds, 5, seed, epoch, true, None)
                .flat_map(|b| b.labels)
                .collect()
        };
        assert_eq!(collect(1, 0), collect(1, 0));
        assert_ne!(collect(1, 0), collect(1, 1));
        assert_ne!(collect(1, 0), collect(2, 0));
    }

    #[test]
    fn stats_constant_dataset_hits_std_floor() {
        let samples = (0..3)
            .map(|i| Sample {
                pixels: vec![0.5; 4],
                label: i % 2,
            })
            .collect();
        let ds = LabeledDataset::from_samples(2, 2, samples, Provenance::Synthetic).unwrap();
        let st = normalization_stats(&ds).unwrap();
        assert!((st.mean - 0.5).abs() < 1e-12);
        assert_eq!(st.std, 1e-6);
        assert!(normalization_stats(&LabeledDataset {
            samples: ds.samples[..1].to_vec(),
            ..ds.clone()
        })
        .is_err());
    }

    #[test]
    fn stats_match_two_pass_oracle_and_self_normalize() {
        let ds = gen_synthetic(&[8, 8], 8, 10).unwrap();
        let st = normalization_stats(&ds).unwrap();

        // independent two-pass oracle
        let all: Vec<f64> = ds.samples.iter().flat_map(|s| s.pixels.clone()).collect();
        let mean: f64 = all.iter().sum::<f64>() / all.len() as f64;
        let var: f64 = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!((st.mean - mean).abs() < 1e-9);
        assert!((st.std - var.sqrt()).abs() < 1e-9);

        let st2 = normalization_stats(&ds.normalized(&st)).unwrap();
        assert!(st2.mean.abs() < 1e-6);
        assert!((st2.std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn from_samples_rejects_label_gaps() {
        let samples = vec![
            Sample {
                pixels: vec![0.0; 4],
                label: 0,
            },
            Sample {
                pixels: vec![1.0; 4],
                label: 2,
            },
        ];
        assert!(matches!(
            LabeledDataset::from_samples(2, 2, samples, Provenance::Synthetic),
            Err(DataError::EmptyClass(1))
        ));
    }
}
