//! The training objective: weighted cross-entropy, autoencoder
//! reconstruction error, and the two-term prototype alignment loss in its
//! class-reserved form plus the dataset-level (unreserved) ablation.

use std::fmt;
use std::str::FromStr;

use crate::data::DataError;
use crate::model::{BoundModel, ForwardPass, PrototypeLayout};
use crate::scalar::Scalar;
use crate::tape::{Tape, TapeError, TapeResult, TensorId};

/// Floor inside `-log p`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Which prototype alignment loss to train with. `Unreserved` ignores labels
/// (the prior dataset-level formulation); under imbalance it lets every
/// prototype drift to the majority cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtoMode {
    Reserved,
    Unreserved,
}

impl fmt::Display for ProtoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtoMode::Reserved => write!(f, "reserved"),
            ProtoMode::Unreserved => write!(f, "unreserved"),
        }
    }
}

impl FromStr for ProtoMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reserved" => Ok(ProtoMode::Reserved),
            "unreserved" => Ok(ProtoMode::Unreserved),
            other => Err(format!("mode must be reserved|unreserved, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossWeights<S: Scalar> {
    pub lambda1: S,
    pub lambda2: S,
    pub class_weights: Vec<S>,
}

impl<S: Scalar> LossWeights<S> {
    pub fn new(lambda1: f64, lambda2: f64, class_weights: Vec<f64>) -> Self {
        LossWeights {
            lambda1: S::from_f64(lambda1),
            lambda2: S::from_f64(lambda2),
            class_weights: class_weights.into_iter().map(S::from_f64).collect(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), String> {
        if self.lambda1 < S::zero() || self.lambda2 < S::zero() {
            return Err("lambda coefficients must be >= 0".into());
        }
        if self.class_weights.len() != num_classes {
            return Err(format!(
                "{} class weights for {} classes",
                self.class_weights.len(),
                num_classes
            ));
        }
        if self.class_weights.iter().any(|&w| w <= S::zero()) {
            return Err("class weights must be strictly positive".into());
        }
        Ok(())
    }
}

/// Scalar values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub ae: f64,
    pub proto_term1: f64,
    pub proto_term2: f64,
}

impl LossBreakdown {
    pub fn composed(&self, lambda1: f64, lambda2: f64) -> f64 {
        self.classification + lambda1 * self.ae + lambda2 * (self.proto_term1 + self.proto_term2)
    }

    /// Relative gap of the accounting identity
    /// `total = classification + l1*ae + l2*(term1+term2)`.
    pub fn identity_gap(&self, lambda1: f64, lambda2: f64) -> f64 {
        let composed = self.composed(lambda1, lambda2);
        (self.total - composed).abs() / self.total.abs().max(1.0)
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("classification", self.classification),
            ("ae", self.ae),
            ("proto_term1", self.proto_term1),
            ("proto_term2", self.proto_term2),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// `w_j = n / (N * n_j)`: inverse-frequency weights that are all ones for
/// balanced counts.
pub fn compute_class_weights(class_counts: &[usize]) -> Result<Vec<f64>, DataError> {
    if let Some(class) = class_counts.iter().position(|&c| c == 0) {
        return Err(DataError::EmptyClass(class));
    }
    let n: usize = class_counts.iter().sum();
    let k = class_counts.len();
    Ok(class_counts
        .iter()
        .map(|&nj| n as f64 / (k as f64 * nj as f64))
        .collect())
}

/// Mean over the batch of the summed squared pixel error.
pub fn ae_loss<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    reconstruction: TensorId,
) -> TapeResult<TensorId> {
    let diff = tape.sub(reconstruction, x)?;
    let sq = tape.mul(diff, diff)?;
    let per_sample = tape.sum(sq, Some(1))?;
    tape.mean(per_sample, None)
}

/// Weight-normalized cross-entropy over probability rows:
/// `sum_i w_{y_i} * (-log p[i, y_i]) / sum_i w_{y_i}`, with the log floored
/// at [`LOG_FLOOR`].
pub fn weighted_ce<S: Scalar>(
    tape: &mut Tape<S>,
    probs: TensorId,
    labels: &[usize],
    class_weights: &[S],
) -> TapeResult<TensorId> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TapeError::ShapeMismatch {
            op: "weighted-ce",
            detail: format!("probs shape {shape:?} vs {} labels", labels.len()),
        });
    }
    let num_classes = shape[1];
    if class_weights.len() != num_classes {
        return Err(TapeError::ShapeMismatch {
            op: "weighted-ce",
            detail: format!("{} weights for {num_classes} classes", class_weights.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(TapeError::ShapeMismatch {
            op: "weighted-ce",
            detail: format!("label {bad} out of range for {num_classes} classes"),
        });
    }

    let weight_sum: S = labels.iter().map(|&y| class_weights[y]).sum();
    let mut mask = vec![S::zero(); labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        mask[i * num_classes + y] = -class_weights[y] / weight_sum;
    }
    let mask = tape.constant(mask, &shape)?;
    let log_p = tape.ln_clamped(probs, S::from_f64(LOG_FLOOR))?;
    let weighted = tape.mul(log_p, mask)?;
    tape.sum(weighted, None)
}

/// Class-reserved prototype alignment. Term 1 pulls each encoding toward the
/// nearest prototype reserved for its own class; term 2 pulls each prototype
/// toward the nearest same-class encoding. Classes absent from the batch are
/// skipped in term 2 and excluded from its normalizer.
pub fn proto_loss_reserved<S: Scalar>(
    tape: &mut Tape<S>,
    encodings: TensorId,
    labels: &[usize],
    prototypes: TensorId,
    layout: PrototypeLayout,
) -> TapeResult<(TensorId, TensorId)> {
    let batch = tape.shape(encodings)[0];
    if labels.len() != batch {
        return Err(TapeError::ShapeMismatch {
            op: "proto-loss",
            detail: format!("{batch} encodings vs {} labels", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= layout.num_classes) {
        return Err(TapeError::ShapeMismatch {
            op: "proto-loss",
            detail: format!(
                "label {bad} out of range for {} classes",
                layout.num_classes
            ),
        });
    }
    let dist = tape.row_distances(encodings, prototypes)?;
    let mut sample_mins = Vec::new();
    let mut proto_mins = Vec::new();
    for class in 0..layout.num_classes {
        let members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        let rows = tape.select_rows(dist, &members)?;
        let block = tape.slice_cols(rows, layout.reserved(class).start, layout.per_class)?;
        sample_mins.push(tape.min(block, Some(1))?);
        proto_mins.push(tape.min(block, Some(0))?);
    }
    let term1_all = tape.concat1(&sample_mins)?;
    let term1 = tape.mean(term1_all, None)?;
    let term2_all = tape.concat1(&proto_mins)?;
    let term2 = tape.mean(term2_all, None)?;
    Ok((term1, term2))
}

/// Dataset-level ablation: the same two terms with minima over all
/// prototypes (term 1) and all encodings (term 2), ignoring labels.
pub fn proto_loss_unreserved<S: Scalar>(
    tape: &mut Tape<S>,
    encodings: TensorId,
    prototypes: TensorId,
) -> TapeResult<(TensorId, TensorId)> {
    let dist = tape.row_distances(encodings, prototypes)?;
    let sample_mins = tape.min(dist, Some(1))?;
    let term1 = tape.mean(sample_mins, None)?;
    let proto_mins = tape.min(dist, Some(0))?;
    let term2 = tape.mean(proto_mins, None)?;
    Ok((term1, term2))
}

/// One full objective evaluation built on `tape`.
pub struct TotalLoss {
    pub total: TensorId,
    pub forward: ForwardPass,
    pub breakdown: LossBreakdown,
}

/// Runs the forward pass once and composes
/// `ce + lambda1 * ae + lambda2 * (term1 + term2)`.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundModel,
    x: TensorId,
    labels: &[usize],
    weights: &LossWeights<S>,
    mode: ProtoMode,
) -> TapeResult<TotalLoss> {
    let forward = bound.forward(tape, x)?;
    let ce = weighted_ce(tape, forward.probs, labels, &weights.class_weights)?;
    let ae = ae_loss(tape, x, forward.reconstruction)?;
    let (t1, t2) = match mode {
        ProtoMode::Reserved => proto_loss_reserved(
            tape,
            forward.encoding,
            labels,
            bound.prototype_ids(),
            bound.layout(),
        )?,
        ProtoMode::Unreserved => {
            proto_loss_unreserved(tape, forward.encoding, bound.prototype_ids())?
        }
    };
    let ae_term = tape.scalar_mul(ae, weights.lambda1)?;
    let proto_sum = tape.add(t1, t2)?;
    let proto_term = tape.scalar_mul(proto_sum, weights.lambda2)?;
    let partial = tape.add(ce, ae_term)?;
    let total = tape.add(partial, proto_term)?;
    let breakdown = LossBreakdown {
        total: tape.scalar_value(total).to_f64(),
        classification: tape.scalar_value(ce).to_f64(),
        ae: tape.scalar_value(ae).to_f64(),
        proto_term1: tape.scalar_value(t1).to_f64(),
        proto_term2: tape.scalar_value(t2).to_f64(),
    };
    Ok(TotalLoss {
        total,
        forward,
        breakdown,
    })
}
