//! Define-by-run tape: primitives record themselves on the tape during the
//! forward pass, and `backward` walks the records in reverse.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{check_finite, row_major_strides, Result, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    /// Multiply each slice along axis 1 by one coefficient of a vector.
    MulAxis1(VarId, VarId),
    Matmul(VarId, VarId),
    Bmm(VarId, VarId),
    SwapAxes(VarId, usize, usize),
    Reshape(VarId),
    Relu(VarId),
    Gelu(VarId),
    Tanh(VarId),
    Sigmoid(VarId),
    Clamp(VarId, f64, f64),
    SoftmaxLast(VarId),
    LayerNorm { x: VarId, gamma: VarId, beta: VarId },
    Embedding { table: VarId, ids: Vec<usize> },
    CrossEntropyLogits { logits: VarId, labels: Vec<usize>, probs: Vec<f64> },
    KlSoftTargets { logits: VarId, teacher_probs: Vec<f64>, probs: Vec<f64> },
    Mse { pred: VarId, target: Vec<f64> },
    AddScalar(VarId),
    MulScalar(VarId, f64),
    SumAll(VarId),
    MeanAll(VarId),
    MeanAxis1(VarId),
    TakeAxis1(VarId, usize),
    L1Norm(VarId),
    L2Norm(VarId),
    Slice1d { x: VarId, start: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Ordered record of one forward computation. Single-threaded by design;
/// build a fresh tape per forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf; zeros if the loss did not depend on it.
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        if id.tape != self.tape {
            return None;
        }
        self.grads.get(id.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        if id.tape != self.tape {
            return None;
        }
        self.grads.get_mut(id.index).and_then(|g| g.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        debug_assert_eq!(id.tape, self.id);
        &self.nodes[id.index].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.value(id).shape()
    }

    fn check_owned(&self, op: &'static str, id: VarId) -> Result<()> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(TensorError::ForeignVariable { op });
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> VarId {
        let index = self.nodes.len();
        self.nodes.push(Node { op, value, needs_grad });
        VarId { tape: self.id, index }
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.index].needs_grad
    }

    /// Record a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<VarId> {
        check_finite("leaf", tensor.data())?;
        let needs = tensor.requires_grad();
        Ok(self.push(Op::Leaf, tensor.clone(), needs))
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor) -> Result<VarId> {
        check_finite("constant", tensor.data())?;
        Ok(self.push(Op::Leaf, tensor, false))
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<VarId> {
        self.constant(Tensor::scalar(v))
    }

    // --- elementwise binary ops with trailing-shape broadcast -------------

    fn broadcast_check(
        &self,
        op: &'static str,
        a: VarId,
        b: VarId,
    ) -> Result<()> {
        self.check_owned(op, a)?;
        self.check_owned(op, b)?;
        let sa = self.shape(a);
        let sb = self.shape(b);
        let ok = sa == sb || (sb.len() < sa.len() && sa.ends_with(sb));
        if ok {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() })
        }
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<VarId> {
        self.broadcast_check(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.numel();
        let data: Vec<f64> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % nb]))
            .collect();
        check_finite(op_name, &data)?;
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, out, needs))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x * v` where `v` has one coefficient per index of `x`'s axis 1.
    pub fn mul_axis1(&mut self, x: VarId, v: VarId) -> Result<VarId> {
        self.check_owned("mul_axis1", x)?;
        self.check_owned("mul_axis1", v)?;
        let sx = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        if sx.len() < 2 || sv.len() != 1 || sv[0] != sx[1] {
            return Err(TensorError::ShapeMismatch { op: "mul_axis1", lhs: sx, rhs: sv });
        }
        let inner: usize = sx[2..].iter().product();
        let (vx, vv) = (self.value(x), self.value(v));
        let mut data = vx.data().to_vec();
        for b in 0..sx[0] {
            for h in 0..sx[1] {
                let base = (b * sx[1] + h) * inner;
                let coeff = vv.data()[h];
                for d in &mut data[base..base + inner] {
                    *d *= coeff;
                }
            }
        }
        check_finite("mul_axis1", &data)?;
        let out = Tensor::new(sx, data)?;
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(Op::MulAxis1(x, v), out, needs))
    }

    // --- matrix products ---------------------------------------------------

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_owned("matmul", a)?;
        self.check_owned("matmul", b)?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        matmul_kernel(self.value(a).data(), self.value(b).data(), &mut data, m, k, n);
        check_finite("matmul", &data)?;
        let out = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), out, needs))
    }

    /// Batched matmul over equal leading dimension: [b,m,k] x [b,k,n].
    pub fn bmm(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_owned("bmm", a)?;
        self.check_owned("bmm", b)?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch { op: "bmm", lhs: sa, rhs: sb });
        }
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; nb * m * n];
        for i in 0..nb {
            matmul_kernel(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        check_finite("bmm", &data)?;
        let out = Tensor::new(vec![nb, m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Bmm(a, b), out, needs))
    }

    // --- shape ops ----------------------------------------------------------

    pub fn swap_axes(&mut self, x: VarId, ax0: usize, ax1: usize) -> Result<VarId> {
        self.check_owned("swap_axes", x)?;
        let shape = self.shape(x).to_vec();
        if ax0 >= shape.len() || ax1 >= shape.len() {
            return Err(TensorError::Rank {
                op: "swap_axes",
                expected: ax0.max(ax1) + 1,
                shape,
            });
        }
        let out = swap_axes_tensor(self.value(x), ax0, ax1);
        let needs = self.needs(x);
        Ok(self.push(Op::SwapAxes(x, ax0, ax1), out, needs))
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        self.check_owned("reshape", x)?;
        let out = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), out, needs))
    }

    /// Extract a contiguous range of a vector.
    pub fn slice1d(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        self.check_owned("slice1d", x)?;
        let shape = self.shape(x).to_vec();
        if shape.len() != 1 {
            return Err(TensorError::Rank { op: "slice1d", expected: 1, shape });
        }
        if start + len > shape[0] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice1d",
                index: start + len,
                bound: shape[0],
            });
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        let out = Tensor::vector(data);
        let needs = self.needs(x);
        Ok(self.push(Op::Slice1d { x, start }, out, needs))
    }

    // --- unary ops ----------------------------------------------------------

    fn unary(
        &mut self,
        op_name: &'static str,
        x: VarId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<VarId> {
        self.check_owned(op_name, x)?;
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        check_finite(op_name, &data)?;
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(op, out, needs))
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        self.unary("gelu", x, gelu_fwd, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: VarId) -> Result<VarId> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn clamp(&mut self, x: VarId, lo: f64, hi: f64) -> Result<VarId> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn add_scalar(&mut self, x: VarId, c: f64) -> Result<VarId> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: VarId, c: f64) -> Result<VarId> {
        self.unary("mul_scalar", x, |v| v * c, Op::MulScalar(x, c))
    }

    // --- softmax / normalization ---------------------------------------------

    pub fn softmax(&mut self, x: VarId) -> Result<VarId> {
        self.check_owned("softmax", x)?;
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::Rank { op: "softmax", expected: 1, shape });
        }
        let cols = shape[shape.len() - 1];
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_row(row);
        }
        check_finite("softmax", &data)?;
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::SoftmaxLast(x), out, needs))
    }

    /// Layer normalization over the last axis with affine transform.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> Result<VarId> {
        self.check_owned("layer_norm", x)?;
        self.check_owned("layer_norm", gamma)?;
        self.check_owned("layer_norm", beta)?;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: shape.clone(),
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * ((*v - mean) * inv) + b[j];
            }
        }
        check_finite("layer_norm", &data)?;
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, out, needs))
    }

    // --- lookups --------------------------------------------------------------

    /// Gather rows of `table` ([vocab, dim]) producing [ids.len(), dim].
    pub fn embedding(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        self.check_owned("embedding", table)?;
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::Rank { op: "embedding", expected: 2, shape: st });
        }
        let (vocab, dim) = (st[0], st[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            data.extend_from_slice(&self.value(table).data()[id * dim..(id + 1) * dim]);
        }
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        let needs = self.needs(table);
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, out, needs))
    }

    // --- losses ---------------------------------------------------------------

    /// Mean cross-entropy of logits [batch, classes] against integer labels.
    pub fn cross_entropy_logits(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        self.check_owned("cross_entropy_logits", logits)?;
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_logits",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let (batch, classes) = (shape[0], shape[1]);
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(classes).enumerate() {
            let y = labels[i];
            if y >= classes {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_logits",
                    index: y,
                    bound: classes,
                });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            softmax_row(row);
        }
        let loss = total / batch as f64;
        check_finite("cross_entropy_logits", &[loss])?;
        let out = Tensor::scalar(loss);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropyLogits { logits, labels: labels.to_vec(), probs },
            out,
            needs,
        ))
    }

    /// Mean KL(teacher || student) where both sides are probability rows and the
    /// student side is given as logits.  Zero exactly when the distributions match.
    pub fn kl_soft_targets(&mut self, logits: VarId, teacher_probs: &Tensor) -> Result<VarId> {
        self.check_owned("kl_soft_targets", logits)?;
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || teacher_probs.shape() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "kl_soft_targets",
                lhs: shape,
                rhs: teacher_probs.shape().to_vec(),
            });
        }
        let (batch, classes) = (shape[0], shape[1]);
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(classes).enumerate() {
            softmax_row(row);
            for (j, &q) in row.iter().enumerate() {
                let p = teacher_probs.data()[i * classes + j];
                // Both sides go through ln so that p == q gives exactly zero.
                if p > 0.0 {
                    total += p * (p.ln() - q.ln());
                }
            }
        }
        let loss = total / batch as f64;
        check_finite("kl_soft_targets", &[loss])?;
        let out = Tensor::scalar(loss);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::KlSoftTargets { logits, teacher_probs: teacher_probs.data().to_vec(), probs },
            out,
            needs,
        ))
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: VarId, target: &Tensor) -> Result<VarId> {
        self.check_owned("mse", pred)?;
        let shape = self.shape(pred).to_vec();
        if target.shape() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: shape,
                rhs: target.shape().to_vec(),
            });
        }
        let n = self.value(pred).numel() as f64;
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        check_finite("mse", &[loss])?;
        let out = Tensor::scalar(loss);
        let needs = self.needs(pred);
        Ok(self.push(Op::Mse { pred, target: target.data().to_vec() }, out, needs))
    }

    // --- reductions -------------------------------------------------------------

    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        self.check_owned("sum_all", x)?;
        let s = self.value(x).data().iter().sum::<f64>();
        check_finite("sum_all", &[s])?;
        let needs = self.needs(x);
        Ok(self.push(Op::SumAll(x), Tensor::scalar(s), needs))
    }

    pub fn mean_all(&mut self, x: VarId) -> Result<VarId> {
        self.check_owned("mean_all", x)?;
        let n = self.value(x).numel() as f64;
        let s = self.value(x).data().iter().sum::<f64>() / n;
        check_finite("mean_all", &[s])?;
        let needs = self.needs(x);
        Ok(self.push(Op::MeanAll(x), Tensor::scalar(s), needs))
    }

    /// Mean over axis 1 of a rank-3 tensor: [b, l, d] -> [b, d].
    pub fn mean_axis1(&mut self, x: VarId) -> Result<VarId> {
        self.check_owned("mean_axis1", x)?;
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::Rank { op: "mean_axis1", expected: 3, shape });
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let mut data = vec![0.0; b * d];
        let src = self.value(x).data();
        for i in 0..b {
            for j in 0..l {
                let base = (i * l + j) * d;
                for k in 0..d {
                    data[i * d + k] += src[base + k];
                }
            }
        }
        for v in &mut data {
            *v /= l as f64;
        }
        check_finite("mean_axis1", &data)?;
        let out = Tensor::new(vec![b, d], data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::MeanAxis1(x), out, needs))
    }

    /// Select one index along axis 1 of a rank-3 tensor: [b, l, d] -> [b, d].
    pub fn take_axis1(&mut self, x: VarId, idx: usize) -> Result<VarId> {
        self.check_owned("take_axis1", x)?;
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::Rank { op: "take_axis1", expected: 3, shape });
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        if idx >= l {
            return Err(TensorError::IndexOutOfRange { op: "take_axis1", index: idx, bound: l });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            let base = (i * l + idx) * d;
            data.extend_from_slice(&src[base..base + d]);
        }
        let out = Tensor::new(vec![b, d], data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::TakeAxis1(x, idx), out, needs))
    }

    /// Sum of absolute values, as a scalar.
    pub fn l1_norm(&mut self, x: VarId) -> Result<VarId> {
        self.check_owned("l1_norm", x)?;
        let s = self.value(x).data().iter().map(|v| v.abs()).sum::<f64>();
        check_finite("l1_norm", &[s])?;
        let needs = self.needs(x);
        Ok(self.push(Op::L1Norm(x), Tensor::scalar(s), needs))
    }

    /// Euclidean norm, as a scalar.
    pub fn l2_norm(&mut self, x: VarId) -> Result<VarId> {
        self.check_owned("l2_norm", x)?;
        let s = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        check_finite("l2_norm", &[s])?;
        let needs = self.needs(x);
        Ok(self.push(Op::L2Norm(x), Tensor::scalar(s), needs))
    }

    // --- backward -----------------------------------------------------------------

    /// Reverse pass from a scalar loss. Returns gradients for every leaf that
    /// requires grad; leaves the loss never touched get zeros on lookup via
    /// [`Gradients`]. Intermediate gradients are freed as soon as consumed.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        self.check_owned("backward", loss)?;
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::LossNotScalar { shape: loss_shape.to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) if self.nodes[i].needs_grad => {
                    Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g).unwrap())
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { tape: self.id, grads: out })
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], id: VarId, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.index].needs_grad {
            return;
        }
        let slot = &mut grads[id.index];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.index].value.numel()]);
        }
        contrib(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate_inputs(&self, i: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_into(grads, *a, |ga| {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                let nb = self.nodes[b.index].value.numel();
                self.add_into(grads, *b, |gb| {
                    for (k, &s) in g.iter().enumerate() {
                        gb[k % nb] += s;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, |ga| {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                let nb = self.nodes[b.index].value.numel();
                self.add_into(grads, *b, |gb| {
                    for (k, &s) in g.iter().enumerate() {
                        gb[k % nb] -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let va = self.nodes[a.index].value.data();
                let vb = self.nodes[b.index].value.data();
                let nb = vb.len();
                self.add_into(grads, *a, |ga| {
                    for (k, &s) in g.iter().enumerate() {
                        ga[k] += s * vb[k % nb];
                    }
                });
                self.add_into(grads, *b, |gb| {
                    for (k, &s) in g.iter().enumerate() {
                        gb[k % nb] += s * va[k];
                    }
                });
            }
            Op::MulAxis1(x, v) => {
                let sx = self.nodes[x.index].value.shape().to_vec();
                let inner: usize = sx[2..].iter().product();
                let vx = self.nodes[x.index].value.data();
                let vv = self.nodes[v.index].value.data();
                self.add_into(grads, *x, |gx| {
                    for b in 0..sx[0] {
                        for h in 0..sx[1] {
                            let base = (b * sx[1] + h) * inner;
                            for k in 0..inner {
                                gx[base + k] += g[base + k] * vv[h];
                            }
                        }
                    }
                });
                self.add_into(grads, *v, |gv| {
                    for b in 0..sx[0] {
                        for h in 0..sx[1] {
                            let base = (b * sx[1] + h) * inner;
                            let mut acc = 0.0;
                            for k in 0..inner {
                                acc += g[base + k] * vx[base + k];
                            }
                            gv[h] += acc;
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a.index].value.shape();
                let sb = self.nodes[b.index].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let va = self.nodes[a.index].value.data();
                let vb = self.nodes[b.index].value.data();
                self.add_into(grads, *a, |ga| {
                    matmul_grad_lhs(g, vb, ga, m, k, n);
                });
                self.add_into(grads, *b, |gb| {
                    matmul_grad_rhs(va, g, gb, m, k, n);
                });
            }
            Op::Bmm(a, b) => {
                let sa = self.nodes[a.index].value.shape().to_vec();
                let sb = self.nodes[b.index].value.shape().to_vec();
                let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let va = self.nodes[a.index].value.data();
                let vb = self.nodes[b.index].value.data();
                self.add_into(grads, *a, |ga| {
                    for i in 0..nb {
                        matmul_grad_lhs(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                self.add_into(grads, *b, |gb| {
                    for i in 0..nb {
                        matmul_grad_rhs(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::SwapAxes(x, ax0, ax1) => {
                let out_shape = node.value.shape().to_vec();
                let gt = Tensor::new(out_shape, g.to_vec()).unwrap();
                let back = swap_axes_tensor(&gt, *ax0, *ax1);
                self.add_into(grads, *x, |gx| {
                    for (d, &s) in gx.iter_mut().zip(back.data()) {
                        *d += s;
                    }
                });
            }
            Op::Reshape(x) => {
                self.add_into(grads, *x, |gx| {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::Slice1d { x, start } => {
                let len = node.value.numel();
                self.add_into(grads, *x, |gx| {
                    for k in 0..len {
                        gx[start + k] += g[k];
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.nodes[x.index].value.data();
                self.add_into(grads, *x, |gx| {
                    for (k, &s) in g.iter().enumerate() {
                        if vx[k] > 0.0 {
                            gx[k] += s;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.nodes[x.index].value.data();
                self.add_into(grads, *x, |gx| {
                    for (k, &s) in g.iter().enumerate() {
                        gx[k] += s * gelu_grad(vx[k]);
                    }
                });
            }
            Op::Tanh(x) => {
                let vy = node.value.data();
                self.add_into(grads, *x, |gx| {
                    for (k, &s) in g.iter().enumerate() {
                        gx[k] += s * (1.0 - vy[k] * vy[k]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let vy = node.value.data();
                self.add_into(grads, *x, |gx| {
                    for (k, &s) in g.iter().enumerate() {
                        gx[k] += s * vy[k] * (1.0 - vy[k]);
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.nodes[x.index].value.data();
                self.add_into(grads, *x, |gx| {
                    for (k, &s) in g.iter().enumerate() {
                        if vx[k] > *lo && vx[k] < *hi {
                            gx[k] += s;
                        }
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let vy = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                self.add_into(grads, *x, |gx| {
                    for r in 0..vy.len() / cols {
                        let y = &vy[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += y[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let vx = self.nodes[x.index].value.data();
                let vg = self.nodes[gamma.index].value.data();
                let d = *node.value.shape().last().unwrap();
                let rows = vx.len() / d;
                self.add_into(grads, *x, |gx| {
                    for r in 0..rows {
                        let xr = &vx[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gy = gr[j] * vg[j];
                            let xh = (xr[j] - mean) * inv;
                            m1 += gy;
                            m2 += gy * xh;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let gy = gr[j] * vg[j];
                            let xh = (xr[j] - mean) * inv;
                            gx[r * d + j] += inv * (gy - m1 - xh * m2);
                        }
                    }
                });
                self.add_into(grads, *gamma, |gg| {
                    for r in 0..rows {
                        let xr = &vx[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        for j in 0..d {
                            gg[j] += gr[j] * (xr[j] - mean) * inv;
                        }
                    }
                });
                self.add_into(grads, *beta, |gb| {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = node.value.shape()[1];
                self.add_into(grads, *table, |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            gt[id * dim + j] += g[row * dim + j];
                        }
                    }
                });
            }
            Op::CrossEntropyLogits { logits, labels, probs } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / batch as f64;
                self.add_into(grads, *logits, |gl| {
                    for i in 0..batch {
                        for c in 0..classes {
                            let ind = if labels[i] == c { 1.0 } else { 0.0 };
                            gl[i * classes + c] += scale * (probs[i * classes + c] - ind);
                        }
                    }
                });
            }
            Op::KlSoftTargets { logits, teacher_probs, probs } => {
                let n = probs.len();
                let rows = node_batch_rows(&self.nodes[logits.index].value);
                let scale = g[0] / rows as f64;
                self.add_into(grads, *logits, |gl| {
                    for k in 0..n {
                        gl[k] += scale * (probs[k] - teacher_probs[k]);
                    }
                });
            }
            Op::Mse { pred, target } => {
                let vp = self.nodes[pred.index].value.data();
                let scale = 2.0 * g[0] / vp.len() as f64;
                self.add_into(grads, *pred, |gp| {
                    for k in 0..vp.len() {
                        gp[k] += scale * (vp[k] - target[k]);
                    }
                });
            }
            Op::AddScalar(x) => {
                self.add_into(grads, *x, |gx| {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::MulScalar(x, c) => {
                let c = *c;
                self.add_into(grads, *x, |gx| {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += s * c;
                    }
                });
            }
            Op::SumAll(x) => {
                self.add_into(grads, *x, |gx| {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.index].value.numel() as f64;
                self.add_into(grads, *x, |gx| {
                    for d in gx.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
            Op::MeanAxis1(x) => {
                let sx = self.nodes[x.index].value.shape().to_vec();
                let (b, l, d) = (sx[0], sx[1], sx[2]);
                self.add_into(grads, *x, |gx| {
                    for i in 0..b {
                        for j in 0..l {
                            for k in 0..d {
                                gx[(i * l + j) * d + k] += g[i * d + k] / l as f64;
                            }
                        }
                    }
                });
            }
            Op::TakeAxis1(x, idx) => {
                let sx = self.nodes[x.index].value.shape().to_vec();
                let (b, l, d) = (sx[0], sx[1], sx[2]);
                let idx = *idx;
                self.add_into(grads, *x, |gx| {
                    for i in 0..b {
                        let base = (i * l + idx) * d;
                        for k in 0..d {
                            gx[base + k] += g[i * d + k];
                        }
                    }
                });
            }
            Op::L1Norm(x) => {
                let vx = self.nodes[x.index].value.data();
                self.add_into(grads, *x, |gx| {
                    for k in 0..vx.len() {
                        gx[k] += g[0] * sign(vx[k]);
                    }
                });
            }
            Op::L2Norm(x) => {
                let norm = node.value.item();
                if norm > 0.0 {
                    let vx = self.nodes[x.index].value.data();
                    self.add_into(grads, *x, |gx| {
                        for k in 0..vx.len() {
                            gx[k] += g[0] * vx[k] / norm;
                        }
                    });
                }
            }
        }
    }
}

fn node_batch_rows(t: &Tensor) -> usize {
    t.shape().first().copied().unwrap_or(1)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// C += A * B with A [m,k], B [k,n], C [m,n]; C is assumed zeroed by caller.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// dA += dC * B^T.
fn matmul_grad_lhs(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (dv, &bv) in dcrow.iter().zip(brow) {
                acc += dv * bv;
            }
            da[i * k + p] += acc;
        }
    }
}

/// dB += A^T * dC.
fn matmul_grad_rhs(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dv, &s) in dbrow.iter_mut().zip(dcrow) {
                *dv += av * s;
            }
        }
    }
}

fn swap_axes_tensor(x: &Tensor, ax0: usize, ax1: usize) -> Tensor {
    if ax0 == ax1 {
        return x.clone();
    }
    let shape = x.shape();
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let in_strides = row_major_strides(shape);
    let out_strides = row_major_strides(&out_shape);
    let mut data = vec![0.0; x.numel()];
    let rank = shape.len();
    let mut coords = vec![0usize; rank];
    for (out_idx, slot) in data.iter_mut().enumerate() {
        // Decompose out_idx into output coords.
        let mut rem = out_idx;
        for (d, s) in out_strides.iter().enumerate() {
            coords[d] = rem / s;
            rem %= s;
        }
        coords.swap(ax0, ax1);
        let mut in_idx = 0;
        for (d, s) in in_strides.iter().enumerate() {
            in_idx += coords[d] * s;
        }
        coords.swap(ax0, ax1);
        *slot = x.data()[in_idx];
    }
    Tensor::new(out_shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_with_grad(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> VarId {
        let t = Tensor::new(shape, data).unwrap().with_grad();
        tape.leaf(&t).unwrap()
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut tape = Tape::new();
        let a = leaf_with_grad(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = leaf_with_grad(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = leaf_with_grad(&mut tape, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = leaf_with_grad(&mut tape, vec![2], vec![0.0, 0.0]);
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let mut tape = Tape::new();
        let w = leaf_with_grad(&mut tape, vec![1], vec![3.0]);
        let y = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_constant_loss_leaves_zero_grad() {
        let mut tape = Tape::new();
        let w = leaf_with_grad(&mut tape, vec![2], vec![1.0, 2.0]);
        let c = tape.scalar_const(5.0).unwrap();
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        // w never feeds the loss: its gradient slot stays empty.
        assert!(grads.get(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = leaf_with_grad(&mut tape, vec![2], vec![1.0, 2.0]);
        let err = tape.backward(w).unwrap_err();
        assert!(matches!(err, TensorError::LossNotScalar { .. }));
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = leaf_with_grad(&mut a, vec![1], vec![1.0]);
        let y = leaf_with_grad(&mut b, vec![1], vec![1.0]);
        assert!(matches!(a.add(x, y), Err(TensorError::ForeignVariable { .. })));
        // A handle from another tape cannot seed backward either.
        assert!(matches!(b.backward(x), Err(TensorError::ForeignVariable { .. })));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = leaf_with_grad(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf_with_grad(&mut tape, vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut tape = Tape::new();
        let t = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(tape.leaf(&t), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let logits = leaf_with_grad(&mut tape, vec![1, 2], vec![0.3, 0.3]);
        let loss = tape.cross_entropy_logits(logits, &[0]).unwrap();
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_is_exactly_zero_for_matching_distributions() {
        let mut tape = Tape::new();
        let logits = leaf_with_grad(&mut tape, vec![2, 3], vec![0.1, 1.4, -0.3, 2.0, 0.0, 0.5]);
        let sm = tape.softmax(logits).unwrap();
        let teacher = tape.value(sm).clone();
        let kl = tape.kl_soft_targets(logits, &teacher).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut tape = Tape::new();
        let logits = leaf_with_grad(&mut tape, vec![1, 3], vec![0.0, 0.5, -0.4]);
        let teacher = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.3]).unwrap();
        let kl = tape.kl_soft_targets(logits, &teacher).unwrap();
        assert!(tape.value(kl).item() > 0.0);
    }

    #[test]
    fn swap_axes_round_trips() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let s = swap_axes_tensor(&t, 0, 2);
        assert_eq!(s.shape(), &[4, 3, 2]);
        let back = swap_axes_tensor(&s, 0, 2);
        assert_eq!(back.data(), t.data());
        // spot check: t[1,2,3] == s[3,2,1]
        assert_eq!(t.data()[1 * 12 + 2 * 4 + 3], s.data()[3 * 6 + 2 * 2 + 1]);
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut tape = Tape::new();
        let table = leaf_with_grad(&mut tape, vec![3, 2], vec![0.0; 6]);
        assert!(tape.embedding(table, &[0, 3]).is_err());
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || {
            let mut tape = Tape::new();
            let a = leaf_with_grad(
                &mut tape,
                vec![3, 3],
                vec![0.1, -0.7, 0.33, 1.5, -2.0, 0.004, 0.9, 0.9, -0.1],
            );
            let b = leaf_with_grad(
                &mut tape,
                vec![3, 3],
                vec![-0.5, 0.2, 0.8, 0.1, 0.1, -0.9, 2.0, -1.0, 0.5],
            );
            let c = tape.matmul(a, b).unwrap();
            let d = tape.gelu(c).unwrap();
            let e = tape.softmax(d).unwrap();
            let loss = tape.mean_all(e).unwrap();
            tape.value(loss).item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
