//! The training loop: per batch, one tape, one objective evaluation, one
//! backward pass, one Adam step. Fully deterministic under a seed.

use thiserror::Error;

use crate::data::{batches, normalization_stats, DataError, LabeledDataset, NormStats};
use crate::loss::{compute_class_weights, total_loss, LossBreakdown, LossWeights, ProtoMode};
use crate::metrics::evaluate;
use crate::model::{Architecture, ModelError, PreciseModel};
use crate::optim::AdamState;
use crate::scalar::Scalar;
use crate::tape::{Tape, TapeError};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss: term `{term}` at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        term: String,
        epoch: usize,
        step: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub per_class_prototypes: usize,
    pub mode: ProtoMode,
    pub num_seeds: usize,
    pub seed: u64,
    pub subset_fraction: f64,
    pub normalize: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            lambda1: 1.0,
            lambda2: 0.001,
            per_class_prototypes: 2,
            mode: ProtoMode::Reserved,
            num_seeds: 3,
            seed: 0,
            subset_fraction: 1.0,
            normalize: true,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// One-line canonical rendering, embedded in reports for provenance.
    pub fn echo(&self) -> String {
        format!(
            "epochs={} batch_size={} lr={} weight_decay={} lambda1={} lambda2={} d={} mode={} num_seeds={} seed={} fraction={} normalize={} workers={}",
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.weight_decay,
            self.lambda1,
            self.lambda2,
            self.per_class_prototypes,
            self.mode,
            self.num_seeds,
            self.seed,
            self.subset_fraction,
            self.normalize,
            self.workers,
        )
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.learning_rate <= 0.0 {
            return bad(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        if self.weight_decay < 0.0 || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad("weight_decay and lambda coefficients must be >= 0".into());
        }
        if self.per_class_prototypes == 0 {
            return bad("per_class_prototypes must be >= 1".into());
        }
        if self.num_seeds == 0 {
            return bad("num_seeds must be >= 1".into());
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad(format!(
                "subset_fraction {} outside (0, 1]",
                self.subset_fraction
            ));
        }
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean: LossBreakdown,
    pub val_accuracy: Option<f64>,
}

pub struct TrainOutcome<S: Scalar> {
    pub model: PreciseModel<S>,
    pub history: Vec<EpochRecord>,
    /// Every optimization step's loss values, in order.
    pub steps: Vec<LossBreakdown>,
    pub stats: Option<NormStats>,
}

/// Trains a model on `ds_train`. When `initial` is absent a fresh model is
/// initialized from `(arch, seed, ds_train)`. `ds_val`, when given, is scored
/// after every epoch. Aborts with a named term on any non-finite loss.
pub fn train<S: Scalar>(
    ds_train: &LabeledDataset,
    ds_val: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    arch: &Architecture,
    seed: u64,
    initial: Option<PreciseModel<S>>,
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    if ds_train.is_empty() {
        return Err(TrainError::InvalidConfig("empty training set".into()));
    }
    let stats = if cfg.normalize {
        Some(normalization_stats(ds_train)?)
    } else {
        None
    };
    let mut model = match initial {
        Some(m) => m,
        None => PreciseModel::init_with_data(arch.clone(), seed, ds_train, stats.as_ref())?,
    };
    let class_weights = compute_class_weights(&ds_train.class_counts)?;
    let weights = LossWeights::<S>::new(cfg.lambda1, cfg.lambda2, class_weights);
    weights
        .validate(arch.num_classes)
        .map_err(TrainError::InvalidConfig)?;

    let mut adam = AdamState::new(&model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut epoch_sum = LossBreakdown {
            total: 0.0,
            classification: 0.0,
            ae: 0.0,
            proto_term1: 0.0,
            proto_term2: 0.0,
        };
        let mut batch_count = 0usize;
        for (step, batch) in batches::<S>(
            ds_train,
            cfg.batch_size,
            seed,
            epoch as u64,
            true,
            stats.as_ref(),
        )
        .enumerate()
        {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true)?;
            let x = tape.leaf(batch.x.clone(), &[batch.len(), arch.pixels()], false)?;
            let out = total_loss(&mut tape, &bound, x, &batch.labels, &weights, cfg.mode).map_err(
                |e| match e {
                    TapeError::NonFinite { op } => TrainError::NonFiniteLoss {
                        term: format!("forward op `{op}`"),
                        epoch,
                        step,
                    },
                    other => TrainError::Tape(other),
                },
            )?;
            if let Some(term) = out.breakdown.non_finite_term() {
                return Err(TrainError::NonFiniteLoss {
                    term: term.to_string(),
                    epoch,
                    step,
                });
            }
            tape.backward(out.total)?;
            let grads: Vec<Vec<S>> = bound
                .param_ids
                .iter()
                .map(|&id| {
                    tape.grad(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![S::zero(); tape.values(id).len()])
                })
                .collect();
            adam.step(
                &mut model.params,
                &grads,
                cfg.learning_rate,
                cfg.weight_decay,
            );

            epoch_sum.total += out.breakdown.total;
            epoch_sum.classification += out.breakdown.classification;
            epoch_sum.ae += out.breakdown.ae;
            epoch_sum.proto_term1 += out.breakdown.proto_term1;
            epoch_sum.proto_term2 += out.breakdown.proto_term2;
            batch_count += 1;
            steps.push(out.breakdown);
        }
        let scale = 1.0 / batch_count as f64;
        let mean = LossBreakdown {
            total: epoch_sum.total * scale,
            classification: epoch_sum.classification * scale,
            ae: epoch_sum.ae * scale,
            proto_term1: epoch_sum.proto_term1 * scale,
            proto_term2: epoch_sum.proto_term2 * scale,
        };
        let val_accuracy = match ds_val {
            Some(val) => Some(evaluate(&model, val, stats.as_ref(), cfg.batch_size)?.accuracy),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            mean,
            val_accuracy,
        });
    }

    Ok(TrainOutcome {
        model,
        history,
        steps,
        stats,
    })
}
