//! Training and explanation engine for a prototype-reservation image classifier.
//!
//! The model couples an MLP autoencoder with a prototype-metric layer and a
//! linear head. Every class owns a fixed block of prototypes in the latent
//! space; the classifier consumes the vector of Euclidean distances from an
//! encoding to all prototypes, which makes that vector both the decision
//! input and the explanation. Training runs on a small reverse-mode autodiff
//! tape ([`tape::Tape`]) with Adam, weighted cross-entropy for imbalance, and
//! a reservation-aware prototype alignment loss.

// index loops over parallel flat buffers read better than zipped iterators here
#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod data;
pub mod explain;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pgm;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod tape;
pub mod train;

pub use data::{DataError, LabeledDataset, NormStats, SubsetSpec};
pub use loss::{LossBreakdown, LossWeights, ProtoMode};
pub use metrics::{MetricsReport, SeedMetrics};
pub use model::{Architecture, PreciseModel, PrototypeLayout};
pub use scalar::{Scalar, ScalarWidth};
pub use tape::{Tape, TapeError, TensorId};
pub use train::{TrainConfig, TrainError};
