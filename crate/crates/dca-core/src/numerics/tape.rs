//! Reverse-mode differentiation over a recorded operation tape.
//!
//! The forward pass records each primitive into a linear tape; the backward
//! pass replays the entries in exact reverse order, accumulating
//! vector-Jacobian products into per-value gradient slots. The loss is a
//! scalar and the parameters are many, so reverse mode is the right
//! direction. A tape is confined to one thread for its whole
//! forward+backward lifetime; parallelism happens across independent tapes.

use crate::error::{DcaError, Result};
use crate::numerics::matrix::Matrix;

/// Index of a value in the tape arena.
pub type ValueId = usize;

/// One recorded primitive. Operands and outputs are arena indices.
#[derive(Debug, Clone)]
enum Op {
    /// out = a @ b
    Matmul { a: ValueId, b: ValueId, out: ValueId },
    /// out = a^T
    Transpose { a: ValueId, out: ValueId },
    /// out = a + b
    Add { a: ValueId, b: ValueId, out: ValueId },
    /// out = a - b
    Sub { a: ValueId, b: ValueId, out: ValueId },
    /// out = a ⊙ b (entrywise)
    Hadamard { a: ValueId, b: ValueId, out: ValueId },
    /// out = factor * a
    Scale { a: ValueId, factor: f64, out: ValueId },
    /// out = tanh(a), entrywise
    Tanh { a: ValueId, out: ValueId },
    /// out = max(a, 0), entrywise
    Relu { a: ValueId, out: ValueId },
    /// out = sqrt(max(a, 0)); backward treats the clipped region as flat
    SqrtFloor { a: ValueId, out: ValueId },
    /// out[:,j] = softmax(a[:,j] / t) per column, max-subtracted
    SoftmaxCols { a: ValueId, temperature: f64, out: ValueId },
    /// out (rows x L) with out[i,l] = src[l, col]; src is L x k
    ReplicateCol {
        src: ValueId,
        col: usize,
        rows: usize,
        out: ValueId,
    },
    /// out (d x cols) with out[i,l] = v[i, 0]; v is d x 1
    BroadcastCol { v: ValueId, cols: usize, out: ValueId },
    /// out = [a; b] stacked vertically
    ConcatRows { a: ValueId, b: ValueId, out: ValueId },
    /// out = [a, b] side by side
    ConcatCols { a: ValueId, b: ValueId, out: ValueId },
    /// each column scaled to unit L2 norm
    NormalizeCols { a: ValueId, out: ValueId },
    /// each row scaled to unit L2 norm
    NormalizeRows { a: ValueId, out: ValueId },
    /// Additive angular margin on one entry of a cosine column vector:
    /// out[label] = cos[label]*cos(m) - sqrt(max(1-cos[label]^2, 0))*sin(m),
    /// all other entries pass through.
    AamMargin {
        cos: ValueId,
        label: usize,
        margin: f64,
        out: ValueId,
    },
    /// out = logsumexp(z) - z[label] for a logits column vector z
    CrossEntropyLogits { logits: ValueId, label: usize, out: ValueId },
    /// out = 1x1 sum of all entries
    SumAll { a: ValueId, out: ValueId },
}

impl Op {
    fn out(&self) -> ValueId {
        match *self {
            Op::Matmul { out, .. }
            | Op::Transpose { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Hadamard { out, .. }
            | Op::Scale { out, .. }
            | Op::Tanh { out, .. }
            | Op::Relu { out, .. }
            | Op::SqrtFloor { out, .. }
            | Op::SoftmaxCols { out, .. }
            | Op::ReplicateCol { out, .. }
            | Op::BroadcastCol { out, .. }
            | Op::ConcatRows { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::NormalizeCols { out, .. }
            | Op::NormalizeRows { out, .. }
            | Op::AamMargin { out, .. }
            | Op::CrossEntropyLogits { out, .. }
            | Op::SumAll { out, .. } => out,
        }
    }
}

/// Wengert tape: value arena plus the ordered op record.
pub struct Tape {
    vals: Vec<Matrix>,
    ops: Vec<Op>,
    grads: Vec<Option<Matrix>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Register a leaf value (input or parameter).
    pub fn input(&mut self, m: Matrix) -> ValueId {
        let id = self.vals.len();
        self.vals.push(m);
        self.grads.push(None);
        id
    }

    pub fn value(&self, id: ValueId) -> &Matrix {
        &self.vals[id]
    }

    /// The single entry of a 1x1 value.
    pub fn scalar(&self, id: ValueId) -> f64 {
        let m = &self.vals[id];
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar value");
        m.get(0, 0)
    }

    /// Gradient accumulated for `id` by the last `backward` call.
    pub fn grad(&self, id: ValueId) -> Option<&Matrix> {
        self.grads[id].as_ref()
    }

    /// Gradient for `id`, zeros if no gradient flowed there.
    pub fn grad_or_zeros(&self, id: ValueId) -> Matrix {
        let (r, c) = self.vals[id].shape();
        self.grads[id].clone().unwrap_or_else(|| Matrix::zeros(r, c))
    }

    fn push(&mut self, op: Op, value: Matrix) -> ValueId {
        let out = self.vals.len();
        debug_assert_eq!(op.out(), out);
        self.vals.push(value);
        self.grads.push(None);
        self.ops.push(op);
        out
    }

    // ── Recording API ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.vals[a].matmul(&self.vals[b])?;
        let out = self.vals.len();
        Ok(self.push(Op::Matmul { a, b, out }, v))
    }

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        let v = self.vals[a].transpose();
        let out = self.vals.len();
        self.push(Op::Transpose { a, out }, v)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.vals[a].add(&self.vals[b])?;
        let out = self.vals.len();
        Ok(self.push(Op::Add { a, b, out }, v))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.vals[a].sub(&self.vals[b])?;
        let out = self.vals.len();
        Ok(self.push(Op::Sub { a, b, out }, v))
    }

    pub fn hadamard(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = self.vals[a].hadamard(&self.vals[b])?;
        let out = self.vals.len();
        Ok(self.push(Op::Hadamard { a, b, out }, v))
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> Result<ValueId> {
        let v = self.vals[a].scale(factor)?;
        let out = self.vals.len();
        Ok(self.push(Op::Scale { a, factor, out }, v))
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let v = self.vals[a].tanh();
        let out = self.vals.len();
        self.push(Op::Tanh { a, out }, v)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let v = self.vals[a].relu();
        let out = self.vals.len();
        self.push(Op::Relu { a, out }, v)
    }

    pub fn sqrt_floor(&mut self, a: ValueId) -> ValueId {
        let v = self.vals[a].map(|x| x.max(0.0).sqrt());
        let out = self.vals.len();
        self.push(Op::SqrtFloor { a, out }, v)
    }

    pub fn softmax_cols(&mut self, a: ValueId, temperature: f64) -> Result<ValueId> {
        let v = self.vals[a].softmax_cols(temperature)?;
        let out = self.vals.len();
        Ok(self.push(Op::SoftmaxCols { a, temperature, out }, v))
    }

    /// Replicate column `col` of an L x k matrix into `rows` identical rows:
    /// the output is rows x L with out[i, l] = src[l, col].
    pub fn replicate_col(&mut self, src: ValueId, col: usize, rows: usize) -> Result<ValueId> {
        let s = &self.vals[src];
        if col >= s.cols() {
            return Err(DcaError::InvalidParameter(format!(
                "replicate_col: column {col} out of range for {} columns",
                s.cols()
            )));
        }
        let v = replicate_col_forward(s, col, rows);
        let out = self.vals.len();
        Ok(self.push(Op::ReplicateCol { src, col, rows, out }, v))
    }

    /// Broadcast a d x 1 column vector across `cols` columns.
    pub fn broadcast_col(&mut self, v: ValueId, cols: usize) -> Result<ValueId> {
        let src = &self.vals[v];
        if src.cols() != 1 {
            return Err(DcaError::ShapeMismatch {
                op: "broadcast_col",
                lhs: src.shape(),
                rhs: (src.rows(), 1),
            });
        }
        let m = broadcast_col_forward(src, cols);
        let out = self.vals.len();
        Ok(self.push(Op::BroadcastCol { v, cols, out }, m))
    }

    pub fn concat_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ma, mb) = (&self.vals[a], &self.vals[b]);
        if ma.cols() != mb.cols() {
            return Err(DcaError::ShapeMismatch {
                op: "concat_rows",
                lhs: ma.shape(),
                rhs: mb.shape(),
            });
        }
        let v = concat_rows_forward(ma, mb);
        let out = self.vals.len();
        Ok(self.push(Op::ConcatRows { a, b, out }, v))
    }

    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ma, mb) = (&self.vals[a], &self.vals[b]);
        if ma.rows() != mb.rows() {
            return Err(DcaError::ShapeMismatch {
                op: "concat_cols",
                lhs: ma.shape(),
                rhs: mb.shape(),
            });
        }
        let v = concat_cols_forward(ma, mb);
        let out = self.vals.len();
        Ok(self.push(Op::ConcatCols { a, b, out }, v))
    }

    pub fn normalize_cols(&mut self, a: ValueId) -> Result<ValueId> {
        let v = normalize_cols_forward(&self.vals[a])?;
        let out = self.vals.len();
        Ok(self.push(Op::NormalizeCols { a, out }, v))
    }

    pub fn normalize_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let v = normalize_rows_forward(&self.vals[a])?;
        let out = self.vals.len();
        Ok(self.push(Op::NormalizeRows { a, out }, v))
    }

    /// Apply the additive angular margin to the true-class entry of a cosine
    /// column vector: cos θ -> cos(θ + m).
    pub fn aam_margin(&mut self, cos: ValueId, label: usize, margin: f64) -> Result<ValueId> {
        let c = &self.vals[cos];
        if c.cols() != 1 || label >= c.rows() {
            return Err(DcaError::InvalidLabel {
                label,
                n_speakers: c.rows(),
            });
        }
        let v = aam_margin_forward(c, label, margin);
        let out = self.vals.len();
        Ok(self.push(Op::AamMargin { cos, label, margin, out }, v))
    }

    /// Softmax cross-entropy of a logits column vector against `label`,
    /// computed as logsumexp(z) - z[label] with max subtraction and ln_1p so
    /// near-zero losses keep full precision.
    pub fn cross_entropy_logits(&mut self, logits: ValueId, label: usize) -> Result<ValueId> {
        let z = &self.vals[logits];
        if z.cols() != 1 || label >= z.rows() {
            return Err(DcaError::InvalidLabel {
                label,
                n_speakers: z.rows(),
            });
        }
        let v = cross_entropy_forward(z, label);
        let out = self.vals.len();
        Ok(self.push(Op::CrossEntropyLogits { logits, label, out }, v))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s: f64 = self.vals[a].data().iter().sum();
        let out = self.vals.len();
        self.push(Op::SumAll { a, out }, Matrix::new(1, 1, vec![s]).expect("finite sum"))
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Accumulate gradients of the scalar `loss` into every reachable value,
    /// visiting ops in exact reverse order of recording.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.vals[loss].shape() != (1, 1) {
            return Err(DcaError::InvalidParameter(
                "backward requires a 1x1 loss value".into(),
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss] = Some(Matrix::new(1, 1, vec![1.0])?);
        for idx in (0..self.ops.len()).rev() {
            let op = self.ops[idx].clone();
            let Some(d_out) = self.grads[op.out()].clone() else {
                continue;
            };
            self.backward_op(&op, &d_out)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: ValueId, g: Matrix) -> Result<()> {
        match &mut self.grads[id] {
            Some(existing) => {
                *existing = existing.add(&g)?;
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op, d_out: &Matrix) -> Result<()> {
        match *op {
            Op::Matmul { a, b, .. } => {
                let d_a = d_out.matmul(&self.vals[b].transpose())?;
                let d_b = self.vals[a].transpose().matmul(d_out)?;
                self.accumulate(a, d_a)?;
                self.accumulate(b, d_b)?;
            }
            Op::Transpose { a, .. } => {
                self.accumulate(a, d_out.transpose())?;
            }
            Op::Add { a, b, .. } => {
                self.accumulate(a, d_out.clone())?;
                self.accumulate(b, d_out.clone())?;
            }
            Op::Sub { a, b, .. } => {
                self.accumulate(a, d_out.clone())?;
                self.accumulate(b, d_out.scale(-1.0)?)?;
            }
            Op::Hadamard { a, b, .. } => {
                let d_a = d_out.hadamard(&self.vals[b])?;
                let d_b = d_out.hadamard(&self.vals[a])?;
                self.accumulate(a, d_a)?;
                self.accumulate(b, d_b)?;
            }
            Op::Scale { a, factor, .. } => {
                self.accumulate(a, d_out.scale(factor)?)?;
            }
            Op::Tanh { a, out } => {
                // d tanh = 1 - tanh^2, reusing the recorded output
                let y = &self.vals[out];
                let d_a = d_out.hadamard(&y.map(|t| 1.0 - t * t))?;
                self.accumulate(a, d_a)?;
            }
            Op::Relu { a, .. } => {
                let x = &self.vals[a];
                let mask = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(a, d_out.hadamard(&mask)?)?;
            }
            Op::SqrtFloor { a, out } => {
                let x = self.vals[a].clone();
                let y = self.vals[out].clone();
                let d_a = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                    if x.get(i, j) > 0.0 {
                        d_out.get(i, j) * 0.5 / y.get(i, j)
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(a, d_a)?;
            }
            Op::SoftmaxCols { a, temperature, out } => {
                // per column j: d_x = (s ⊙ (d_y - <d_y, s>)) / T
                let s = self.vals[out].clone();
                let (r, c) = s.shape();
                let mut d_a = Matrix::zeros(r, c);
                for j in 0..c {
                    let mut dot = 0.0;
                    for i in 0..r {
                        dot += d_out.get(i, j) * s.get(i, j);
                    }
                    for i in 0..r {
                        let v = s.get(i, j) * (d_out.get(i, j) - dot) / temperature;
                        d_a.set(i, j, v);
                    }
                }
                self.accumulate(a, d_a)?;
            }
            Op::ReplicateCol { src, col, .. } => {
                // d_src[l, col] = sum_i d_out[i, l]
                let (sr, sc) = self.vals[src].shape();
                let mut d_src = Matrix::zeros(sr, sc);
                for l in 0..d_out.cols() {
                    let mut sum = 0.0;
                    for i in 0..d_out.rows() {
                        sum += d_out.get(i, l);
                    }
                    d_src.set(l, col, sum);
                }
                self.accumulate(src, d_src)?;
            }
            Op::BroadcastCol { v, .. } => {
                let rows = self.vals[v].rows();
                let mut d_v = Matrix::zeros(rows, 1);
                for i in 0..rows {
                    let mut sum = 0.0;
                    for l in 0..d_out.cols() {
                        sum += d_out.get(i, l);
                    }
                    d_v.set(i, 0, sum);
                }
                self.accumulate(v, d_v)?;
            }
            Op::ConcatRows { a, b, .. } => {
                let ra = self.vals[a].rows();
                let rb = self.vals[b].rows();
                let c = d_out.cols();
                let d_a = Matrix::from_fn(ra, c, |i, j| d_out.get(i, j))?;
                let d_b = Matrix::from_fn(rb, c, |i, j| d_out.get(ra + i, j))?;
                self.accumulate(a, d_a)?;
                self.accumulate(b, d_b)?;
            }
            Op::ConcatCols { a, b, .. } => {
                let ca = self.vals[a].cols();
                let cb = self.vals[b].cols();
                let r = d_out.rows();
                let d_a = Matrix::from_fn(r, ca, |i, j| d_out.get(i, j))?;
                let d_b = Matrix::from_fn(r, cb, |i, j| d_out.get(i, ca + j))?;
                self.accumulate(a, d_a)?;
                self.accumulate(b, d_b)?;
            }
            Op::NormalizeCols { a, out } => {
                // u = x / n with n = ||x||: d_x = (d_u - u <u, d_u>) / n
                let x = self.vals[a].clone();
                let u = self.vals[out].clone();
                let (r, c) = x.shape();
                let mut d_a = Matrix::zeros(r, c);
                for j in 0..c {
                    let mut norm_sq = 0.0;
                    let mut dot = 0.0;
                    for i in 0..r {
                        norm_sq += x.get(i, j) * x.get(i, j);
                        dot += u.get(i, j) * d_out.get(i, j);
                    }
                    let n = norm_sq.sqrt();
                    for i in 0..r {
                        d_a.set(i, j, (d_out.get(i, j) - u.get(i, j) * dot) / n);
                    }
                }
                self.accumulate(a, d_a)?;
            }
            Op::NormalizeRows { a, out } => {
                let x = self.vals[a].clone();
                let u = self.vals[out].clone();
                let (r, c) = x.shape();
                let mut d_a = Matrix::zeros(r, c);
                for i in 0..r {
                    let mut norm_sq = 0.0;
                    let mut dot = 0.0;
                    for j in 0..c {
                        norm_sq += x.get(i, j) * x.get(i, j);
                        dot += u.get(i, j) * d_out.get(i, j);
                    }
                    let n = norm_sq.sqrt();
                    for j in 0..c {
                        d_a.set(i, j, (d_out.get(i, j) - u.get(i, j) * dot) / n);
                    }
                }
                self.accumulate(a, d_a)?;
            }
            Op::AamMargin { cos, label, margin, .. } => {
                // d/dc [c cos m - sqrt(1-c^2) sin m] = cos m + c sin m / sqrt(1-c^2)
                let c = self.vals[cos].clone();
                let mut d_c = d_out.clone();
                let cy = c.get(label, 0);
                let one_minus = 1.0 - cy * cy;
                let slope = if one_minus > 0.0 {
                    margin.cos() + cy * margin.sin() / one_minus.sqrt()
                } else {
                    margin.cos()
                };
                d_c.set(label, 0, d_out.get(label, 0) * slope);
                self.accumulate(cos, d_c)?;
            }
            Op::CrossEntropyLogits { logits, label, .. } => {
                // d_z = softmax(z) - onehot(label), scaled by upstream scalar
                let z = &self.vals[logits];
                let s = z.softmax_cols(1.0)?;
                let g = d_out.get(0, 0);
                let d_z = Matrix::from_fn(z.rows(), 1, |i, _| {
                    let onehot = if i == label { 1.0 } else { 0.0 };
                    g * (s.get(i, 0) - onehot)
                })?;
                self.accumulate(logits, d_z)?;
            }
            Op::SumAll { a, .. } => {
                let (r, c) = self.vals[a].shape();
                let g = d_out.get(0, 0);
                self.accumulate(a, Matrix::from_fn(r, c, |_, _| g)?)?;
            }
        }
        Ok(())
    }

    // ── Replay ──────────────────────────────────────────────────────────

    /// Recompute every recorded op from its operands and check the results
    /// are bit-identical to the stored forward values.
    pub fn replay_matches(&self) -> Result<bool> {
        for op in &self.ops {
            let recomputed = self.forward_value(op)?;
            if !recomputed.bits_eq(&self.vals[op.out()]) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn forward_value(&self, op: &Op) -> Result<Matrix> {
        Ok(match *op {
            Op::Matmul { a, b, .. } => self.vals[a].matmul(&self.vals[b])?,
            Op::Transpose { a, .. } => self.vals[a].transpose(),
            Op::Add { a, b, .. } => self.vals[a].add(&self.vals[b])?,
            Op::Sub { a, b, .. } => self.vals[a].sub(&self.vals[b])?,
            Op::Hadamard { a, b, .. } => self.vals[a].hadamard(&self.vals[b])?,
            Op::Scale { a, factor, .. } => self.vals[a].scale(factor)?,
            Op::Tanh { a, .. } => self.vals[a].tanh(),
            Op::Relu { a, .. } => self.vals[a].relu(),
            Op::SqrtFloor { a, .. } => self.vals[a].map(|x| x.max(0.0).sqrt()),
            Op::SoftmaxCols { a, temperature, .. } => self.vals[a].softmax_cols(temperature)?,
            Op::ReplicateCol { src, col, rows, .. } => {
                replicate_col_forward(&self.vals[src], col, rows)
            }
            Op::BroadcastCol { v, cols, .. } => broadcast_col_forward(&self.vals[v], cols),
            Op::ConcatRows { a, b, .. } => concat_rows_forward(&self.vals[a], &self.vals[b]),
            Op::ConcatCols { a, b, .. } => concat_cols_forward(&self.vals[a], &self.vals[b]),
            Op::NormalizeCols { a, .. } => normalize_cols_forward(&self.vals[a])?,
            Op::NormalizeRows { a, .. } => normalize_rows_forward(&self.vals[a])?,
            Op::AamMargin { cos, label, margin, .. } => {
                aam_margin_forward(&self.vals[cos], label, margin)
            }
            Op::CrossEntropyLogits { logits, label, .. } => {
                cross_entropy_forward(&self.vals[logits], label)
            }
            Op::SumAll { a, .. } => {
                let s: f64 = self.vals[a].data().iter().sum();
                Matrix::new(1, 1, vec![s])?
            }
        })
    }
}

fn replicate_col_forward(src: &Matrix, col: usize, rows: usize) -> Matrix {
    let clips = src.rows();
    let mut out = Matrix::zeros(rows, clips);
    for i in 0..rows {
        for l in 0..clips {
            out.set(i, l, src.get(l, col));
        }
    }
    out
}

fn broadcast_col_forward(v: &Matrix, cols: usize) -> Matrix {
    let mut out = Matrix::zeros(v.rows(), cols);
    for i in 0..v.rows() {
        for l in 0..cols {
            out.set(i, l, v.get(i, 0));
        }
    }
    out
}

fn concat_rows_forward(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows() + b.rows(), a.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out.set(i, j, a.get(i, j));
        }
    }
    for i in 0..b.rows() {
        for j in 0..b.cols() {
            out.set(a.rows() + i, j, b.get(i, j));
        }
    }
    out
}

fn concat_cols_forward(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out.set(i, j, a.get(i, j));
        }
        for j in 0..b.cols() {
            out.set(i, a.cols() + j, b.get(i, j));
        }
    }
    out
}

fn normalize_cols_forward(x: &Matrix) -> Result<Matrix> {
    let (r, c) = x.shape();
    let mut out = Matrix::zeros(r, c);
    for j in 0..c {
        let mut norm_sq = 0.0;
        for i in 0..r {
            norm_sq += x.get(i, j) * x.get(i, j);
        }
        if norm_sq == 0.0 {
            return Err(DcaError::DegenerateEmbedding);
        }
        let n = norm_sq.sqrt();
        for i in 0..r {
            out.set(i, j, x.get(i, j) / n);
        }
    }
    Ok(out)
}

fn normalize_rows_forward(x: &Matrix) -> Result<Matrix> {
    let (r, c) = x.shape();
    let mut out = Matrix::zeros(r, c);
    for i in 0..r {
        let mut norm_sq = 0.0;
        for j in 0..c {
            norm_sq += x.get(i, j) * x.get(i, j);
        }
        if norm_sq == 0.0 {
            return Err(DcaError::DegenerateEmbedding);
        }
        let n = norm_sq.sqrt();
        for j in 0..c {
            out.set(i, j, x.get(i, j) / n);
        }
    }
    Ok(out)
}

fn aam_margin_forward(cos: &Matrix, label: usize, margin: f64) -> Matrix {
    let mut out = cos.clone();
    let c = cos.get(label, 0);
    let sin_theta = (1.0 - c * c).max(0.0).sqrt();
    out.set(label, 0, c * margin.cos() - sin_theta * margin.sin());
    out
}

fn cross_entropy_forward(z: &Matrix, label: usize) -> Matrix {
    let max = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // logsumexp = max + ln(1 + sum of the non-max exponentials)
    let mut rest = 0.0;
    let mut max_seen = false;
    for &v in z.data() {
        if !max_seen && v == max {
            max_seen = true;
            continue;
        }
        rest += (v - max).exp();
    }
    // (max - z[label]) first: exact zero when the label holds the max, so
    // near-zero losses are not swamped by the magnitude of the logits
    let loss = (max - z.get(label, 0)) + rest.ln_1p();
    Matrix::new(1, 1, vec![loss]).expect("finite cross entropy")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn forward_values_match_plain_matrix_ops() {
        let mut t = Tape::new();
        let a = t.input(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = t.input(mat(2, 2, &[0.5, -1.0, 2.0, 0.0]));
        let c = t.matmul(a, b).unwrap();
        let expected = t.value(a).matmul(t.value(b)).unwrap();
        assert!(t.value(c).bits_eq(&expected));
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut t = Tape::new();
        let x = t.input(mat(2, 3, &[1.0, -2.0, 0.5, 4.0, 0.0, -1.0]));
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap();
        for &v in g.data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn backward_visits_in_reverse_and_accumulates() {
        // f = sum(x ⊙ x): gradient = 2x, exercising two uses of one value
        let mut t = Tape::new();
        let x = t.input(mat(1, 3, &[1.0, -2.0, 3.0]));
        let sq = t.hadamard(x, x).unwrap();
        let s = t.sum_all(sq);
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap();
        assert_eq!(g.data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut t = Tape::new();
        let x = t.input(mat(3, 2, &[0.3, -1.2, 0.7, 2.2, -0.4, 0.9]));
        let w = t.input(mat(3, 3, &[0.1, 0.2, -0.3, 0.5, -0.1, 0.4, 0.0, 0.2, 0.6]));
        let h = t.matmul(w, x).unwrap();
        let a = t.tanh(h);
        let sm = t.softmax_cols(a, 0.7).unwrap();
        let _ = t.sum_all(sm);
        assert!(t.replay_matches().unwrap());
    }

    #[test]
    fn cross_entropy_matches_naive_softmax() {
        let z = mat(4, 1, &[1.0, -0.5, 2.0, 0.3]);
        let label = 2;
        let loss = cross_entropy_forward(&z, label).get(0, 0);
        let denom: f64 = z.data().iter().map(|v| v.exp()).sum();
        let naive = -(z.get(label, 0).exp() / denom).ln();
        assert!((loss - naive).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_keeps_tiny_losses_precise() {
        // dominant correct logit: loss ~ exp(-30), far below f64 epsilon of 1
        let z = mat(2, 1, &[30.0, 0.0]);
        let loss = cross_entropy_forward(&z, 0).get(0, 0);
        let expected = (-30.0f64).exp().ln_1p();
        assert!((loss - expected).abs() < 1e-25);
    }

    #[test]
    fn concat_and_split_gradients() {
        let mut t = Tape::new();
        let a = t.input(mat(1, 2, &[1.0, 2.0]));
        let b = t.input(mat(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = t.concat_rows(a, b).unwrap();
        assert_eq!(t.value(c).shape(), (3, 2));
        let w = t.input(mat(3, 2, &[1.0, 0.0, 0.0, 1.0, 2.0, 2.0]));
        let prod = t.hadamard(c, w).unwrap();
        let s = t.sum_all(prod);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(t.grad(b).unwrap().data(), &[0.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn normalize_cols_rejects_zero_column() {
        let mut t = Tape::new();
        let x = t.input(mat(2, 1, &[0.0, 0.0]));
        assert!(matches!(
            t.normalize_cols(x),
            Err(DcaError::DegenerateEmbedding)
        ));
    }

    #[test]
    fn replicate_col_shapes_and_gradient() {
        let mut t = Tape::new();
        // gate scores for 2 clips, 2 columns
        let g = t.input(mat(2, 2, &[0.3, 0.7, 0.9, 0.1]));
        let rep = t.replicate_col(g, 1, 3).unwrap();
        assert_eq!(t.value(rep).shape(), (3, 2));
        assert_eq!(t.value(rep).get(0, 0), 0.7);
        assert_eq!(t.value(rep).get(2, 1), 0.1);
        let s = t.sum_all(rep);
        t.backward(s).unwrap();
        // each replicated entry contributes once per row
        assert_eq!(t.grad(g).unwrap().data(), &[0.0, 3.0, 0.0, 3.0]);
    }
}
