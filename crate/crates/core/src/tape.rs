//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! Tensors live in an arena owned by the [`Tape`]; handles are plain indices.
//! Each op records enough of its inputs to replay the chain rule in exact
//! reverse execution order. A tape is single-threaded and built fresh for
//! every training step; parameters persist outside the tape and are
//! re-registered as leaves each step.

use thiserror::Error;

use crate::scalar::Scalar;

/// Epsilon guard inside the Euclidean distance sqrt, forward and backward.
/// Prototypes can coincide with encodings early in training; the guard keeps
/// the distance differentiable there.
pub const DISTANCE_EPSILON: f64 = 1e-12;

#[derive(Error, Debug)]
pub enum TapeError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid axis {axis} for rank-{rank} tensor")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: reduction over empty extent")]
    EmptyReduce { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward target must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("unknown op tag `{0}`")]
    UnknownTag(String),
    #[error("invalid tensor shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
}

pub type TapeResult<T> = Result<T, TapeError>;

/// Handle to a tensor on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        a: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    ScalarMul {
        a: TensorId,
        c: S,
    },
    AddRowBroadcast {
        a: TensorId,
        bias: TensorId,
    },
    Relu {
        a: TensorId,
    },
    Sigmoid {
        a: TensorId,
    },
    Exp {
        a: TensorId,
    },
    LnClamped {
        a: TensorId,
        floor: S,
    },
    Sum {
        a: TensorId,
        axis: Option<usize>,
    },
    Mean {
        a: TensorId,
        axis: Option<usize>,
    },
    Min {
        a: TensorId,
        argmins: Vec<usize>,
    },
    RowDistances {
        a: TensorId,
        b: TensorId,
    },
    LogSoftmax {
        a: TensorId,
    },
    SelectRows {
        a: TensorId,
        rows: Vec<usize>,
    },
    SliceCols {
        a: TensorId,
        start: usize,
        len: usize,
    },
    Concat1 {
        parts: Vec<TensorId>,
    },
}

struct Node<S: Scalar> {
    values: Vec<S>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn scalar_value(&self, id: TensorId) -> S {
        self.nodes[id.0].values[0]
    }

    // ── Construction ────────────────────────────────────────────────

    /// Registers an input tensor. `requires_grad` marks it as a gradient
    /// target for [`Tape::backward`].
    pub fn leaf(
        &mut self,
        values: Vec<S>,
        shape: &[usize],
        requires_grad: bool,
    ) -> TapeResult<TensorId> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TapeError::InvalidShape {
                shape: shape.to_vec(),
                reason: "extents must be positive".into(),
            });
        }
        if values.len() != numel(shape) {
            return Err(TapeError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!(
                    "buffer has {} values, shape wants {}",
                    values.len(),
                    numel(shape)
                ),
            });
        }
        Ok(self.push(values, shape.to_vec(), requires_grad, Op::Leaf))
    }

    /// Registers a constant (never differentiated).
    pub fn constant(&mut self, values: Vec<S>, shape: &[usize]) -> TapeResult<TensorId> {
        self.leaf(values, shape, false)
    }

    fn push(
        &mut self,
        values: Vec<S>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op<S>,
    ) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            values,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    fn record(
        &mut self,
        op_name: &'static str,
        values: Vec<S>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op<S>,
    ) -> TapeResult<TensorId> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TapeError::NonFinite { op: op_name });
        }
        Ok(self.push(values, shape, requires_grad, op))
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn want_2d(&self, op: &'static str, id: TensorId) -> TapeResult<(usize, usize)> {
        let shape = &self.nodes[id.0].shape;
        if shape.len() != 2 {
            return Err(TapeError::ShapeMismatch {
                op,
                detail: format!("expected rank-2 tensor, got shape {shape:?}"),
            });
        }
        Ok((shape[0], shape[1]))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        let (r, k) = self.want_2d("matmul", a)?;
        let (k2, c) = self.want_2d("matmul", b)?;
        if k != k2 {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner extents {k} vs {k2}"),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for t in 0..k {
                let ait = av[i * k + t];
                for j in 0..c {
                    out[i * c + j] += ait * bv[t * c + j];
                }
            }
        }
        let rg = self.needs_grad(&[a, b]);
        self.record("matmul", out, vec![r, c], rg, Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, a: TensorId) -> TapeResult<TensorId> {
        let (r, c) = self.want_2d("transpose", a)?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.needs_grad(&[a]);
        self.record("transpose", out, vec![c, r], rg, Op::Transpose { a })
    }

    // ── Elementwise ─────────────────────────────────────────────────

    /// Binary elementwise layout: equal shapes, or a single-element tensor on
    /// either side broadcast against the other.
    fn binary_layout(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> TapeResult<(Vec<usize>, bool, bool)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let na = numel(sa);
        let nb = numel(sb);
        if sa == sb {
            Ok((sa.clone(), false, false))
        } else if na == 1 {
            Ok((sb.clone(), true, false))
        } else if nb == 1 {
            Ok((sa.clone(), false, true))
        } else {
            Err(TapeError::ShapeMismatch {
                op,
                detail: format!("{sa:?} vs {sb:?} (need equal shapes or a scalar side)"),
            })
        }
    }

    fn binary<F>(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: F,
        op: Op<S>,
    ) -> TapeResult<TensorId>
    where
        F: Fn(S, S) -> S,
    {
        let (shape, a_scalar, b_scalar) = self.binary_layout(op_name, a, b)?;
        let n = numel(&shape);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = av[if a_scalar { 0 } else { i }];
            let y = bv[if b_scalar { 0 } else { i }];
            out.push(f(x, y));
        }
        let rg = self.needs_grad(&[a, b]);
        self.record(op_name, out, shape, rg, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scalar_mul(&mut self, a: TensorId, c: S) -> TapeResult<TensorId> {
        let out: Vec<S> = self.nodes[a.0].values.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a]);
        self.record("scalar-mul", out, shape, rg, Op::ScalarMul { a, c })
    }

    /// `[r x c] + [c]`, bias repeated over rows.
    pub fn add_row_broadcast(&mut self, a: TensorId, bias: TensorId) -> TapeResult<TensorId> {
        let (r, c) = self.want_2d("add-row-broadcast", a)?;
        let bshape = &self.nodes[bias.0].shape;
        if bshape.len() != 1 || bshape[0] != c {
            return Err(TapeError::ShapeMismatch {
                op: "add-row-broadcast",
                detail: format!("bias shape {bshape:?} does not match {c} columns"),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(av[i * c + j] + bv[j]);
            }
        }
        let rg = self.needs_grad(&[a, bias]);
        self.record(
            "add-row-broadcast",
            out,
            vec![r, c],
            rg,
            Op::AddRowBroadcast { a, bias },
        )
    }

    fn unary<F>(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        f: F,
        op: Op<S>,
    ) -> TapeResult<TensorId>
    where
        F: Fn(S) -> S,
    {
        let out: Vec<S> = self.nodes[a.0].values.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a]);
        self.record(op_name, out, shape, rg, op)
    }

    pub fn relu(&mut self, a: TensorId) -> TapeResult<TensorId> {
        self.unary(
            "relu",
            a,
            |x| if x > S::zero() { x } else { S::zero() },
            Op::Relu { a },
        )
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TapeResult<TensorId> {
        self.unary(
            "sigmoid",
            a,
            |x| S::one() / (S::one() + (-x).exp()),
            Op::Sigmoid { a },
        )
    }

    pub fn exp(&mut self, a: TensorId) -> TapeResult<TensorId> {
        self.unary("exp", a, |x| x.exp(), Op::Exp { a })
    }

    /// `ln(max(x, floor))`; gradient is zero in the clamped region.
    pub fn ln_clamped(&mut self, a: TensorId, floor: S) -> TapeResult<TensorId> {
        self.unary(
            "ln-clamped",
            a,
            |x| if x > floor { x.ln() } else { floor.ln() },
            Op::LnClamped { a, floor },
        )
    }

    // ── Reductions ──────────────────────────────────────────────────

    /// Output shape of an axis reduction plus the input-linear index stride
    /// walk: (out_shape, outer, axis_len, inner).
    fn reduce_layout(
        &self,
        op: &'static str,
        a: TensorId,
        axis: Option<usize>,
    ) -> TapeResult<(Vec<usize>, usize, usize, usize)> {
        let shape = &self.nodes[a.0].shape;
        let n = numel(shape);
        if n == 0 {
            return Err(TapeError::EmptyReduce { op });
        }
        match axis {
            None => Ok((vec![1], 1, n, 1)),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(TapeError::InvalidAxis {
                        op,
                        axis: ax,
                        rank: shape.len(),
                    });
                }
                let outer: usize = shape[..ax].iter().product();
                let inner: usize = shape[ax + 1..].iter().product();
                let mut out_shape: Vec<usize> = shape[..ax]
                    .iter()
                    .chain(shape[ax + 1..].iter())
                    .copied()
                    .collect();
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                Ok((out_shape, outer, shape[ax], inner))
            }
        }
    }

    pub fn sum(&mut self, a: TensorId, axis: Option<usize>) -> TapeResult<TensorId> {
        let (out_shape, outer, axis_len, inner) = self.reduce_layout("sum", a, axis)?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for t in 0..axis_len {
                for i in 0..inner {
                    out[o * inner + i] += av[o * axis_len * inner + t * inner + i];
                }
            }
        }
        let rg = self.needs_grad(&[a]);
        self.record("sum", out, out_shape, rg, Op::Sum { a, axis })
    }

    pub fn mean(&mut self, a: TensorId, axis: Option<usize>) -> TapeResult<TensorId> {
        let (out_shape, outer, axis_len, inner) = self.reduce_layout("mean", a, axis)?;
        let av = &self.nodes[a.0].values;
        let scale = S::one() / S::from_f64(axis_len as f64);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for t in 0..axis_len {
                for i in 0..inner {
                    out[o * inner + i] += av[o * axis_len * inner + t * inner + i];
                }
            }
        }
        for v in &mut out {
            *v *= scale;
        }
        let rg = self.needs_grad(&[a]);
        self.record("mean", out, out_shape, rg, Op::Mean { a, axis })
    }

    /// Min reduction. The argmin (ties broken by lowest index) is recorded so
    /// backward routes the gradient only to the minimizer.
    pub fn min(&mut self, a: TensorId, axis: Option<usize>) -> TapeResult<TensorId> {
        let (out_shape, outer, axis_len, inner) = self.reduce_layout("min", a, axis)?;
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmins = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = av[o * axis_len * inner + i];
                let mut best_idx = o * axis_len * inner + i;
                for t in 1..axis_len {
                    let idx = o * axis_len * inner + t * inner + i;
                    if av[idx] < best {
                        best = av[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmins.push(best_idx);
            }
        }
        let rg = self.needs_grad(&[a]);
        self.record("min", out, out_shape, rg, Op::Min { a, argmins })
    }

    // ── Structured ops ──────────────────────────────────────────────

    /// Pairwise Euclidean distances between the rows of `a` `[p x d]` and the
    /// rows of `b` `[q x d]`, guarded as `sqrt(s + eps)`.
    pub fn row_distances(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        let (p, d) = self.want_2d("row-distances", a)?;
        let (q, d2) = self.want_2d("row-distances", b)?;
        if d != d2 {
            return Err(TapeError::ShapeMismatch {
                op: "row-distances",
                detail: format!("feature extents {d} vs {d2}"),
            });
        }
        let eps = S::from_f64(DISTANCE_EPSILON);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = Vec::with_capacity(p * q);
        for i in 0..p {
            for j in 0..q {
                let mut s = S::zero();
                for t in 0..d {
                    let diff = av[i * d + t] - bv[j * d + t];
                    s += diff * diff;
                }
                out.push((s + eps).sqrt());
            }
        }
        let rg = self.needs_grad(&[a, b]);
        self.record(
            "row-distances",
            out,
            vec![p, q],
            rg,
            Op::RowDistances { a, b },
        )
    }

    /// Row-wise log-softmax, stabilized by max subtraction.
    pub fn log_softmax(&mut self, a: TensorId) -> TapeResult<TensorId> {
        let (r, c) = self.want_2d("log-softmax", a)?;
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(row[0], S::max);
            let lse = row.iter().map(|&x| (x - m).exp()).sum::<S>().ln();
            for &x in row {
                out.push(x - m - lse);
            }
        }
        let rg = self.needs_grad(&[a]);
        self.record("log-softmax", out, vec![r, c], rg, Op::LogSoftmax { a })
    }

    pub fn select_rows(&mut self, a: TensorId, rows: &[usize]) -> TapeResult<TensorId> {
        let (r, c) = self.want_2d("select-rows", a)?;
        if rows.is_empty() {
            return Err(TapeError::ShapeMismatch {
                op: "select-rows",
                detail: "empty row selection".into(),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TapeError::ShapeMismatch {
                op: "select-rows",
                detail: format!("row {bad} out of bounds for {r} rows"),
            });
        }
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let rg = self.needs_grad(&[a]);
        self.record(
            "select-rows",
            out,
            vec![rows.len(), c],
            rg,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TapeResult<TensorId> {
        let (r, c) = self.want_2d("slice-cols", a)?;
        if len == 0 || start + len > c {
            return Err(TapeError::ShapeMismatch {
                op: "slice-cols",
                detail: format!("columns {start}..{} out of bounds for {c}", start + len),
            });
        }
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let rg = self.needs_grad(&[a]);
        self.record(
            "slice-cols",
            out,
            vec![r, len],
            rg,
            Op::SliceCols { a, start, len },
        )
    }

    /// Concatenates rank-1 tensors into one rank-1 tensor.
    pub fn concat1(&mut self, parts: &[TensorId]) -> TapeResult<TensorId> {
        if parts.is_empty() {
            return Err(TapeError::ShapeMismatch {
                op: "concat1",
                detail: "no parts".into(),
            });
        }
        let mut out = Vec::new();
        for &p in parts {
            let shape = &self.nodes[p.0].shape;
            if shape.len() != 1 {
                return Err(TapeError::ShapeMismatch {
                    op: "concat1",
                    detail: format!("part has shape {shape:?}, expected rank 1"),
                });
            }
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        let shape = vec![out.len()];
        let rg = self.needs_grad(parts);
        self.record(
            "concat1",
            out,
            shape,
            rg,
            Op::Concat1 {
                parts: parts.to_vec(),
            },
        )
    }

    // ── Tag dispatch (string-facing surface) ────────────────────────

    /// Elementwise dispatch by tag name. `scalar-mul` takes the constant in
    /// `c`; the other binary tags take `b`.
    pub fn elementwise(
        &mut self,
        tag: &str,
        a: TensorId,
        b: Option<TensorId>,
        c: Option<S>,
    ) -> TapeResult<TensorId> {
        let missing = |op| TapeError::ShapeMismatch {
            op,
            detail: "missing second operand".into(),
        };
        match tag {
            "add" => self.add(a, b.ok_or(missing("add"))?),
            "sub" => self.sub(a, b.ok_or(missing("sub"))?),
            "mul" => self.mul(a, b.ok_or(missing("mul"))?),
            "scalar-mul" => self.scalar_mul(a, c.ok_or(missing("scalar-mul"))?),
            "relu" => self.relu(a),
            "sigmoid" => self.sigmoid(a),
            _ => Err(TapeError::UnknownTag(tag.to_string())),
        }
    }

    /// Reduction dispatch by tag name.
    pub fn reduce(&mut self, tag: &str, a: TensorId, axis: Option<usize>) -> TapeResult<TensorId> {
        match tag {
            "sum" => self.sum(a, axis),
            "mean" => self.mean(a, axis),
            "min" => self.min(a, axis),
            _ => Err(TapeError::UnknownTag(tag.to_string())),
        }
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Propagates gradients of a scalar loss to every `requires_grad` tensor.
    /// Accumulation is additive: calling backward twice doubles the grads.
    pub fn backward(&mut self, loss: TensorId) -> TapeResult<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(TapeError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        // Pass-local buffers, folded into persistent grads at the end.
        let mut local: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let g = match local[i].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[i].requires_grad {
                let grad = self.nodes[i]
                    .grad
                    .get_or_insert_with(|| vec![S::zero(); g.len()]);
                for (dst, src) in grad.iter_mut().zip(&g) {
                    *dst += *src;
                }
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (r, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let c = self.nodes[b.0].shape[1];
                    if self.nodes[a.0].requires_grad {
                        // da = g . b^T
                        let bv = &self.nodes[b.0].values;
                        let da = Self::local_mut(&mut local, a, r * k);
                        for i2 in 0..r {
                            for j in 0..c {
                                let gij = g[i2 * c + j];
                                for t in 0..k {
                                    da[i2 * k + t] += gij * bv[t * c + j];
                                }
                            }
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        // db = a^T . g
                        let av = &self.nodes[a.0].values;
                        let db = Self::local_mut(&mut local, b, k * c);
                        for i2 in 0..r {
                            for t in 0..k {
                                let ait = av[i2 * k + t];
                                for j in 0..c {
                                    db[t * c + j] += ait * g[i2 * c + j];
                                }
                            }
                        }
                    }
                }
                Op::Transpose { a } => {
                    if self.nodes[a.0].requires_grad {
                        let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                        let da = Self::local_mut(&mut local, a, r * c);
                        for i2 in 0..r {
                            for j in 0..c {
                                da[i2 * c + j] += g[j * r + i2];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    self.binary_backward(&mut local, a, b, &g, |_, _, gi| (gi, gi));
                }
                Op::Sub { a, b } => {
                    self.binary_backward(&mut local, a, b, &g, |_, _, gi| (gi, -gi));
                }
                Op::Mul { a, b } => {
                    self.binary_backward(&mut local, a, b, &g, |x, y, gi| (gi * y, gi * x));
                }
                Op::ScalarMul { a, c } => {
                    if self.nodes[a.0].requires_grad {
                        let n = self.nodes[a.0].values.len();
                        let da = Self::local_mut(&mut local, a, n);
                        for (dst, &gi) in da.iter_mut().zip(&g) {
                            *dst += gi * c;
                        }
                    }
                }
                Op::AddRowBroadcast { a, bias } => {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    if self.nodes[a.0].requires_grad {
                        let da = Self::local_mut(&mut local, a, r * c);
                        for (dst, &gi) in da.iter_mut().zip(&g) {
                            *dst += gi;
                        }
                    }
                    if self.nodes[bias.0].requires_grad {
                        let db = Self::local_mut(&mut local, bias, c);
                        for i2 in 0..r {
                            for j in 0..c {
                                db[j] += g[i2 * c + j];
                            }
                        }
                    }
                }
                Op::Relu { a } => {
                    if self.nodes[a.0].requires_grad {
                        let n = self.nodes[a.0].values.len();
                        let xs: Vec<S> = self.nodes[a.0].values.clone();
                        let da = Self::local_mut(&mut local, a, n);
                        for i2 in 0..n {
                            if xs[i2] > S::zero() {
                                da[i2] += g[i2];
                            }
                        }
                    }
                }
                Op::Sigmoid { a } => {
                    if self.nodes[a.0].requires_grad {
                        let n = self.nodes[i].values.len();
                        let out: Vec<S> = self.nodes[i].values.clone();
                        let da = Self::local_mut(&mut local, a, n);
                        for i2 in 0..n {
                            da[i2] += g[i2] * out[i2] * (S::one() - out[i2]);
                        }
                    }
                }
                Op::Exp { a } => {
                    if self.nodes[a.0].requires_grad {
                        let n = self.nodes[i].values.len();
                        let out: Vec<S> = self.nodes[i].values.clone();
                        let da = Self::local_mut(&mut local, a, n);
                        for i2 in 0..n {
                            da[i2] += g[i2] * out[i2];
                        }
                    }
                }
                Op::LnClamped { a, floor } => {
                    if self.nodes[a.0].requires_grad {
                        let n = self.nodes[a.0].values.len();
                        let xs: Vec<S> = self.nodes[a.0].values.clone();
                        let da = Self::local_mut(&mut local, a, n);
                        for i2 in 0..n {
                            if xs[i2] > floor {
                                da[i2] += g[i2] / xs[i2];
                            }
                        }
                    }
                }
                Op::Sum { a, axis } => {
                    if self.nodes[a.0].requires_grad {
                        self.spread_reduce_grad(&mut local, a, axis, &g, S::one());
                    }
                }
                Op::Mean { a, axis } => {
                    if self.nodes[a.0].requires_grad {
                        let axis_len = match axis {
                            None => self.nodes[a.0].values.len(),
                            Some(ax) => self.nodes[a.0].shape[ax],
                        };
                        let scale = S::one() / S::from_f64(axis_len as f64);
                        self.spread_reduce_grad(&mut local, a, axis, &g, scale);
                    }
                }
                Op::Min { a, argmins } => {
                    if self.nodes[a.0].requires_grad {
                        let n = self.nodes[a.0].values.len();
                        let da = Self::local_mut(&mut local, a, n);
                        for (k, &src) in argmins.iter().enumerate() {
                            da[src] += g[k];
                        }
                    }
                }
                Op::RowDistances { a, b } => {
                    let (p, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let q = self.nodes[b.0].shape[0];
                    let av = self.nodes[a.0].values.clone();
                    let bv = self.nodes[b.0].values.clone();
                    let out = self.nodes[i].values.clone();
                    if self.nodes[a.0].requires_grad {
                        let da = Self::local_mut(&mut local, a, p * d);
                        for i2 in 0..p {
                            for j in 0..q {
                                let w = g[i2 * q + j] / out[i2 * q + j];
                                for t in 0..d {
                                    da[i2 * d + t] += w * (av[i2 * d + t] - bv[j * d + t]);
                                }
                            }
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = Self::local_mut(&mut local, b, q * d);
                        for i2 in 0..p {
                            for j in 0..q {
                                let w = g[i2 * q + j] / out[i2 * q + j];
                                for t in 0..d {
                                    db[j * d + t] -= w * (av[i2 * d + t] - bv[j * d + t]);
                                }
                            }
                        }
                    }
                }
                Op::LogSoftmax { a } => {
                    if self.nodes[a.0].requires_grad {
                        let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                        let out = self.nodes[i].values.clone();
                        let da = Self::local_mut(&mut local, a, r * c);
                        for i2 in 0..r {
                            let gsum: S = g[i2 * c..(i2 + 1) * c].iter().copied().sum();
                            for j in 0..c {
                                let soft = out[i2 * c + j].exp();
                                da[i2 * c + j] += g[i2 * c + j] - soft * gsum;
                            }
                        }
                    }
                }
                Op::SelectRows { a, rows } => {
                    if self.nodes[a.0].requires_grad {
                        let c = self.nodes[a.0].shape[1];
                        let n = self.nodes[a.0].values.len();
                        let da = Self::local_mut(&mut local, a, n);
                        for (k, &row) in rows.iter().enumerate() {
                            for j in 0..c {
                                da[row * c + j] += g[k * c + j];
                            }
                        }
                    }
                }
                Op::SliceCols { a, start, len } => {
                    if self.nodes[a.0].requires_grad {
                        let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                        let da = Self::local_mut(&mut local, a, r * c);
                        for i2 in 0..r {
                            for j in 0..len {
                                da[i2 * c + start + j] += g[i2 * len + j];
                            }
                        }
                    }
                }
                Op::Concat1 { parts } => {
                    let mut offset = 0;
                    for &p in &parts {
                        let n = self.nodes[p.0].values.len();
                        if self.nodes[p.0].requires_grad {
                            let dp = Self::local_mut(&mut local, p, n);
                            for k in 0..n {
                                dp[k] += g[offset + k];
                            }
                        }
                        offset += n;
                    }
                }
            }
        }
        Ok(())
    }

    fn local_mut(local: &mut [Option<Vec<S>>], id: TensorId, n: usize) -> &mut Vec<S> {
        local[id.0].get_or_insert_with(|| vec![S::zero(); n])
    }

    fn binary_backward<F>(
        &mut self,
        local: &mut [Option<Vec<S>>],
        a: TensorId,
        b: TensorId,
        g: &[S],
        df: F,
    ) where
        F: Fn(S, S, S) -> (S, S),
    {
        let a_scalar = self.nodes[a.0].values.len() == 1 && g.len() > 1;
        let b_scalar = self.nodes[b.0].values.len() == 1 && g.len() > 1;
        let av = self.nodes[a.0].values.clone();
        let bv = self.nodes[b.0].values.clone();
        let a_rg = self.nodes[a.0].requires_grad;
        let b_rg = self.nodes[b.0].requires_grad;
        for (i, &gi) in g.iter().enumerate() {
            let x = av[if a_scalar { 0 } else { i }];
            let y = bv[if b_scalar { 0 } else { i }];
            let (dx, dy) = df(x, y, gi);
            if a_rg {
                Self::local_mut(local, a, av.len())[if a_scalar { 0 } else { i }] += dx;
            }
            if b_rg {
                Self::local_mut(local, b, bv.len())[if b_scalar { 0 } else { i }] += dy;
            }
        }
    }

    /// Broadcasts a reduction's output gradient back over the reduced axis,
    /// scaled (1 for sum, 1/len for mean).
    fn spread_reduce_grad(
        &mut self,
        local: &mut [Option<Vec<S>>],
        a: TensorId,
        axis: Option<usize>,
        g: &[S],
        scale: S,
    ) {
        let shape = self.nodes[a.0].shape.clone();
        let n = self.nodes[a.0].values.len();
        match axis {
            None => {
                let da = Self::local_mut(local, a, n);
                let gv = g[0] * scale;
                for dst in da.iter_mut() {
                    *dst += gv;
                }
            }
            Some(ax) => {
                let outer: usize = shape[..ax].iter().product();
                let axis_len = shape[ax];
                let inner: usize = shape[ax + 1..].iter().product();
                let da = Self::local_mut(local, a, n);
                for o in 0..outer {
                    for t in 0..axis_len {
                        for i in 0..inner {
                            da[o * axis_len * inner + t * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            }
        }
    }
}
