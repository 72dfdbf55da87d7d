//! The network: MLP encoder/decoder pair, a class-blocked prototype bank in
//! the latent space, and a linear head over prototype distances.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::{LabeledDataset, NormStats};
use crate::rng::{mix, rng_from};
use crate::scalar::Scalar;
use crate::tape::{Tape, TapeError, TapeResult, TensorId};

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("prototype init: class {0} has no samples to seed from")]
    EmptyClass(usize),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Static reservation map: prototype `k` belongs to class `k / per_class`,
/// so class `j` owns the contiguous block `j*d .. (j+1)*d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrototypeLayout {
    pub per_class: usize,
    pub num_classes: usize,
}

impl PrototypeLayout {
    pub fn count(&self) -> usize {
        self.per_class * self.num_classes
    }

    pub fn class_of(&self, prototype: usize) -> usize {
        prototype / self.per_class
    }

    pub fn reserved(&self, class: usize) -> Range<usize> {
        class * self.per_class..(class + 1) * self.per_class
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub width: usize,
    pub height: usize,
    /// Encoder hidden sizes; the decoder mirrors them in reverse.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub per_class_prototypes: usize,
    pub num_classes: usize,
    pub classifier_bias: bool,
}

impl Architecture {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn prototype_count(&self) -> usize {
        self.layout().count()
    }

    pub fn layout(&self) -> PrototypeLayout {
        PrototypeLayout {
            per_class: self.per_class_prototypes,
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidArchitecture(msg));
        if self.width == 0 || self.height == 0 {
            return bad(format!("image extents {}x{}", self.width, self.height));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad(format!("hidden sizes {:?}", self.hidden));
        }
        if self.per_class_prototypes == 0 {
            return bad("need at least one prototype per class".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        Ok(())
    }

    /// `[pixels, hidden..., latent]`
    fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.pixels()];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.latent_dim);
        dims
    }

    /// `[latent, hidden reversed..., pixels]`
    fn decoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.latent_dim];
        dims.extend(self.hidden.iter().rev());
        dims.push(self.pixels());
        dims
    }

    fn affine_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// Canonical parameter names and shapes for an architecture, in storage
/// order: encoder pairs, decoder pairs, prototypes, classifier.
pub fn expected_params(arch: &Architecture) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (prefix, dims) in [("enc", arch.encoder_dims()), ("dec", arch.decoder_dims())] {
        for l in 0..dims.len() - 1 {
            out.push((format!("{prefix}.w{l}"), vec![dims[l], dims[l + 1]]));
            out.push((format!("{prefix}.b{l}"), vec![dims[l + 1]]));
        }
    }
    let m = arch.prototype_count();
    out.push(("prototypes".into(), vec![m, arch.latent_dim]));
    out.push(("cls.w".into(), vec![arch.num_classes, m]));
    if arch.classifier_bias {
        out.push(("cls.b".into(), vec![arch.num_classes]));
    }
    out
}

#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<S>,
}

impl<S: Scalar> Param<S> {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// All trainable state plus the architecture needed to rebuild the graph.
#[derive(Debug, Clone)]
pub struct PreciseModel<S: Scalar> {
    pub arch: Architecture,
    pub params: Vec<Param<S>>,
    pub init_seed: u64,
}

/// Tensor ids of one forward evaluation on a tape.
pub struct ForwardPass {
    pub reconstruction: TensorId,
    pub encoding: TensorId,
    pub distances: TensorId,
    pub log_probs: TensorId,
    pub probs: TensorId,
}

/// Plain-buffer forward results for evaluation and reporting.
pub struct ForwardValues<S: Scalar> {
    pub batch: usize,
    pub reconstruction: Vec<S>,
    pub encoding: Vec<S>,
    pub distances: Vec<S>,
    pub probs: Vec<S>,
}

/// The model's parameters registered as leaves on one tape.
pub struct BoundModel {
    pub param_ids: Vec<TensorId>,
    enc: Vec<(TensorId, TensorId)>,
    dec: Vec<(TensorId, TensorId)>,
    protos: TensorId,
    cls_w: TensorId,
    cls_b: Option<TensorId>,
    layout: PrototypeLayout,
}

impl<S: Scalar> PreciseModel<S> {
    /// Fresh model with standard-normal prototypes.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        Self::init_inner(arch, seed, None)
    }

    /// Fresh model whose prototypes start at noisy encodings of randomly
    /// drawn same-class training samples. Weight draws are identical to
    /// [`PreciseModel::init`] for the same seed.
    pub fn init_with_data(
        arch: Architecture,
        seed: u64,
        ds: &LabeledDataset,
        stats: Option<&NormStats>,
    ) -> Result<Self, ModelError> {
        Self::init_inner(arch, seed, Some((ds, stats)))
    }

    fn init_inner(
        arch: Architecture,
        seed: u64,
        proto_source: Option<(&LabeledDataset, Option<&NormStats>)>,
    ) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut weight_rng = rng_from(mix(seed, 0));
        let mut proto_rng = rng_from(mix(seed, 1));

        // Encoder/decoder weights draw uniform(-a, a) with
        // a = sqrt(6/(fan_in+fan_out)); biases start at zero. The linear head
        // starts at zero so its first gradient steps build the discriminant
        // from the class-seeded prototype geometry; a random head can lock in
        // a basin where classes bind to the wrong prototype block.
        let mut params = Vec::new();
        for (name, shape) in expected_params(&arch) {
            let n: usize = shape.iter().product();
            let values = if name.starts_with("enc.w") || name.starts_with("dec.w") {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n)
                    .map(|_| S::from_f64(weight_rng.random_range(-a..a)))
                    .collect()
            } else {
                vec![S::zero(); n]
            };
            params.push(Param {
                name,
                shape,
                values,
            });
        }

        let mut model = PreciseModel {
            arch,
            params,
            init_seed: seed,
        };

        let std_normal = Normal::new(0.0f64, 1.0).expect("valid normal");
        let jitter = Normal::new(0.0f64, 0.01).expect("valid normal");
        let latent = model.arch.latent_dim;
        let layout = model.arch.layout();
        let mut proto_values = vec![S::zero(); layout.count() * latent];
        match proto_source {
            None => {
                for v in proto_values.iter_mut() {
                    *v = S::from_f64(std_normal.sample(&mut proto_rng));
                }
            }
            Some((ds, stats)) => {
                for class in 0..layout.num_classes {
                    let members = ds.class_indices(class);
                    if members.is_empty() {
                        return Err(ModelError::EmptyClass(class));
                    }
                    for slot in layout.reserved(class) {
                        let pick = members[proto_rng.random_range(0..members.len())];
                        let pixels: Vec<S> = ds.sample_pixels::<S>(pick, stats);
                        let z = model.encode_values(&pixels, 1)?;
                        for t in 0..latent {
                            proto_values[slot * latent + t] =
                                z[t] + S::from_f64(jitter.sample(&mut proto_rng));
                        }
                    }
                }
            }
        }
        let idx = model.prototypes_index();
        model.params[idx].values = proto_values;
        Ok(model)
    }

    pub fn prototypes_index(&self) -> usize {
        4 * self.arch.affine_layers()
    }

    pub fn prototypes(&self) -> &Param<S> {
        &self.params[self.prototypes_index()]
    }

    pub fn param_named(&self, name: &str) -> Option<&Param<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> TapeResult<BoundModel> {
        let mut param_ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            param_ids.push(tape.leaf(p.values.clone(), &p.shape, trainable)?);
        }
        let layers = self.arch.affine_layers();
        let enc: Vec<_> = (0..layers)
            .map(|l| (param_ids[2 * l], param_ids[2 * l + 1]))
            .collect();
        let dec: Vec<_> = (0..layers)
            .map(|l| {
                (
                    param_ids[2 * layers + 2 * l],
                    param_ids[2 * layers + 2 * l + 1],
                )
            })
            .collect();
        let protos = param_ids[4 * layers];
        let cls_w = param_ids[4 * layers + 1];
        let cls_b = if self.arch.classifier_bias {
            Some(param_ids[4 * layers + 2])
        } else {
            None
        };
        Ok(BoundModel {
            param_ids,
            enc,
            dec,
            protos,
            cls_w,
            cls_b,
            layout: self.arch.layout(),
        })
    }

    /// Forward pass on a throwaway tape, returning plain buffers.
    pub fn run_forward(&self, x: &[S], batch: usize) -> TapeResult<ForwardValues<S>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let xid = tape.leaf(x.to_vec(), &[batch, self.arch.pixels()], false)?;
        let fp = bound.forward(&mut tape, xid)?;
        Ok(ForwardValues {
            batch,
            reconstruction: tape.values(fp.reconstruction).to_vec(),
            encoding: tape.values(fp.encoding).to_vec(),
            distances: tape.values(fp.distances).to_vec(),
            probs: tape.values(fp.probs).to_vec(),
        })
    }

    pub fn encode_values(&self, x: &[S], batch: usize) -> TapeResult<Vec<S>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let xid = tape.leaf(x.to_vec(), &[batch, self.arch.pixels()], false)?;
        let z = bound.encode(&mut tape, xid)?;
        Ok(tape.values(z).to_vec())
    }

    pub fn decode_values(&self, z: &[S], batch: usize) -> TapeResult<Vec<S>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let zid = tape.leaf(z.to_vec(), &[batch, self.arch.latent_dim], false)?;
        let recon = bound.decode(&mut tape, zid)?;
        Ok(tape.values(recon).to_vec())
    }
}

impl BoundModel {
    fn mlp<S: Scalar>(
        tape: &mut Tape<S>,
        layers: &[(TensorId, TensorId)],
        x: TensorId,
        final_sigmoid: bool,
    ) -> TapeResult<TensorId> {
        let mut h = x;
        for (l, &(w, b)) in layers.iter().enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add_row_broadcast(lin, b)?;
            let last = l + 1 == layers.len();
            if !last {
                h = tape.relu(h)?;
            } else if final_sigmoid {
                h = tape.sigmoid(h)?;
            }
        }
        Ok(h)
    }

    pub fn encode<S: Scalar>(&self, tape: &mut Tape<S>, x: TensorId) -> TapeResult<TensorId> {
        Self::mlp(tape, &self.enc, x, false)
    }

    pub fn decode<S: Scalar>(&self, tape: &mut Tape<S>, z: TensorId) -> TapeResult<TensorId> {
        Self::mlp(tape, &self.dec, z, true)
    }

    /// `[batch x m]` distances, columns ordered by prototype index.
    pub fn prototype_distances<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        z: TensorId,
    ) -> TapeResult<TensorId> {
        tape.row_distances(z, self.protos)
    }

    /// Linear head over raw distances followed by softmax.
    pub fn classify<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        distances: TensorId,
    ) -> TapeResult<(TensorId, TensorId)> {
        let wt = tape.transpose(self.cls_w)?;
        let mut logits = tape.matmul(distances, wt)?;
        if let Some(b) = self.cls_b {
            logits = tape.add_row_broadcast(logits, b)?;
        }
        let log_probs = tape.log_softmax(logits)?;
        let probs = tape.exp(log_probs)?;
        Ok((log_probs, probs))
    }

    /// One shared encoder evaluation feeding both the decoder branch and the
    /// prototype-metric branch.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: TensorId) -> TapeResult<ForwardPass> {
        let encoding = self.encode(tape, x)?;
        let reconstruction = self.decode(tape, encoding)?;
        let distances = self.prototype_distances(tape, encoding)?;
        let (log_probs, probs) = self.classify(tape, distances)?;
        Ok(ForwardPass {
            reconstruction,
            encoding,
            distances,
            log_probs,
            probs,
        })
    }

    pub fn prototype_ids(&self) -> TensorId {
        self.protos
    }

    pub fn layout(&self) -> PrototypeLayout {
        self.layout
    }
}
