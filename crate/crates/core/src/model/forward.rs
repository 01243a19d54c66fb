//! Forward passes over a fresh tape. The graph is rebuilt per call, so model
//! parameters are never mutated and perturbed re-evaluation is cheap.

use crate::tensor::{Result as TensorResult, Tape, Tensor, TensorError, VarId};

use super::{Activation, ModelSpec, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone)]
pub enum BatchInputs {
    /// Real-valued feature rows, shape [batch, dim].
    Features(Tensor),
    /// Integer token sequences, row-major [batch, seq_len].
    Tokens { ids: Vec<usize>, batch: usize, seq_len: usize },
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: BatchInputs,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-layer structural gates injected into the transformer forward pass.
/// `head_gates[l]` has one value per attention head, `ff_gates[l]` one per
/// feed-forward hidden unit.
pub struct GatePlan {
    pub head_gates: Vec<VarId>,
    pub ff_gates: Vec<VarId>,
}

/// A recorded forward pass: the tape, the scalar loss, the logits and the
/// leaf ids of every parameter in registry order.
pub struct ForwardPass {
    pub tape: Tape,
    pub loss: VarId,
    pub logits: VarId,
    pub param_leaves: Vec<VarId>,
}

/// Record loss and logits for `batch` on `tape`. Parameters are inserted as
/// grad-tracked leaves in registry order and their ids returned.
pub fn build_forward(
    params: &ParamStore,
    batch: &Batch,
    loss_kind: LossKind,
    tape: &mut Tape,
    gates: Option<&GatePlan>,
) -> TensorResult<(VarId, VarId, Vec<VarId>)> {
    let mut leaves = Vec::with_capacity(params.len());
    for e in params.entries() {
        let mut t = e.tensor.clone();
        t.set_requires_grad(true);
        leaves.push(tape.leaf(&t)?);
    }
    let logits = match params.spec() {
        ModelSpec::Mlp { .. } => mlp_logits(params, &leaves, batch, tape)?,
        ModelSpec::Transformer { .. } => transformer_logits(params, &leaves, batch, tape, gates)?,
    };
    let loss = match loss_kind {
        LossKind::CrossEntropy => tape.cross_entropy_logits(logits, &batch.labels)?,
        LossKind::Mse => {
            let classes = params.spec().n_classes();
            let mut onehot = Tensor::zeros(vec![batch.len(), classes]);
            for (i, &y) in batch.labels.iter().enumerate() {
                if y >= classes {
                    return Err(TensorError::IndexOutOfRange {
                        op: "mse",
                        index: y,
                        bound: classes,
                    });
                }
                onehot.data_mut()[i * classes + y] = 1.0;
            }
            tape.mse(logits, &onehot)?
        }
    };
    Ok((loss, logits, leaves))
}

/// Forward pass on a fresh tape. Returns the pass plus the accuracy of the
/// logits against the batch labels; the metric itself is not differentiated.
pub fn model_forward(
    params: &ParamStore,
    batch: &Batch,
    loss_kind: LossKind,
) -> TensorResult<(ForwardPass, f64)> {
    let mut tape = Tape::new();
    let (loss, logits, param_leaves) = build_forward(params, batch, loss_kind, &mut tape, None)?;
    let metric = accuracy(tape.value(logits), &batch.labels);
    Ok((ForwardPass { tape, loss, logits, param_leaves }, metric))
}

/// Fraction of rows whose argmax matches the label. Ties resolve to the
/// lowest class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let classes = *logits.shape().last().unwrap_or(&1);
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

fn activation(tape: &mut Tape, act: Activation, x: VarId) -> TensorResult<VarId> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Gelu => tape.gelu(x),
    }
}

fn mlp_logits(
    params: &ParamStore,
    leaves: &[VarId],
    batch: &Batch,
    tape: &mut Tape,
) -> TensorResult<VarId> {
    let BatchInputs::Features(feats) = &batch.inputs else {
        return Err(TensorError::ShapeMismatch {
            op: "mlp_forward",
            lhs: vec![],
            rhs: vec![],
        });
    };
    let ModelSpec::Mlp { hidden, activation: act, .. } = params.spec() else { unreachable!() };
    let mut x = tape.constant(feats.clone())?;
    for i in 0..hidden.len() {
        let w = leaves[params.position(&format!("layer{i}.weight")).unwrap()];
        let b = leaves[params.position(&format!("layer{i}.bias")).unwrap()];
        let h = tape.matmul(x, w)?;
        let h = tape.add(h, b)?;
        x = activation(tape, *act, h)?;
    }
    let w = leaves[params.position("head.weight").unwrap()];
    let b = leaves[params.position("head.bias").unwrap()];
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

/// Linear layer applied to the trailing axis by flattening leading dims.
fn linear(
    tape: &mut Tape,
    x: VarId,
    w: VarId,
    b: VarId,
    rows: usize,
    din: usize,
) -> TensorResult<VarId> {
    let flat = tape.reshape(x, vec![rows, din])?;
    let y = tape.matmul(flat, w)?;
    tape.add(y, b)
}

fn transformer_logits(
    params: &ParamStore,
    leaves: &[VarId],
    batch: &Batch,
    tape: &mut Tape,
    gates: Option<&GatePlan>,
) -> TensorResult<VarId> {
    let BatchInputs::Tokens { ids, batch: bsz, seq_len } = &batch.inputs else {
        return Err(TensorError::ShapeMismatch {
            op: "transformer_forward",
            lhs: vec![],
            rhs: vec![],
        });
    };
    let ModelSpec::Transformer {
        n_layers, n_heads, d_model, d_ff, vocab, max_len, activation: act, ..
    } = params.spec()
    else {
        unreachable!()
    };
    if *seq_len > *max_len {
        return Err(TensorError::IndexOutOfRange {
            op: "transformer_forward",
            index: *seq_len,
            bound: *max_len,
        });
    }
    let (b, d, h) = (*bsz, *d_model, *n_heads);
    let dk = d / h;
    let l1 = seq_len + 1; // readout token prepended
    let p = |name: &str| leaves[params.position(name).unwrap()];

    // Prepend the readout token (reserved row `vocab` of the embedding table).
    let mut full_ids = Vec::with_capacity(b * l1);
    for row in 0..b {
        full_ids.push(*vocab);
        full_ids.extend_from_slice(&ids[row * seq_len..(row + 1) * seq_len]);
    }
    let tok = tape.embedding(p("embed.token"), &full_ids)?;
    let mut x = tape.reshape(tok, vec![b, l1, d])?;
    let pos_ids: Vec<usize> = (0..l1).collect();
    let pos = tape.embedding(p("embed.pos"), &pos_ids)?;
    x = tape.add(x, pos)?; // [b, l1, d] + [l1, d]

    for layer in 0..*n_layers {
        let pre = format!("enc{layer}");
        // Attention block, pre-norm.
        let hx = tape.layer_norm(x, p(&format!("{pre}.ln1.scale")), p(&format!("{pre}.ln1.bias")))?;
        let rows = b * l1;
        let split = |tape: &mut Tape, y: VarId| -> TensorResult<VarId> {
            let y = tape.reshape(y, vec![b, l1, h, dk])?;
            let y = tape.swap_axes(y, 1, 2)?; // [b, h, l1, dk]
            tape.reshape(y, vec![b * h, l1, dk])
        };
        let q = linear(tape, hx, p(&format!("{pre}.attn.wq.weight")), p(&format!("{pre}.attn.wq.bias")), rows, d)?;
        let k = linear(tape, hx, p(&format!("{pre}.attn.wk.weight")), p(&format!("{pre}.attn.wk.bias")), rows, d)?;
        let v = linear(tape, hx, p(&format!("{pre}.attn.wv.weight")), p(&format!("{pre}.attn.wv.bias")), rows, d)?;
        let q = split(tape, q)?;
        let k = split(tape, k)?;
        let v = split(tape, v)?;
        let kt = tape.swap_axes(k, 1, 2)?; // [b*h, dk, l1]
        let scores = tape.bmm(q, kt)?;
        let scores = tape.mul_scalar(scores, 1.0 / (dk as f64).sqrt())?;
        let attn = tape.softmax(scores)?;
        let ctx = tape.bmm(attn, v)?; // [b*h, l1, dk]
        let mut ctx = tape.reshape(ctx, vec![b, h, l1, dk])?;
        if let Some(gp) = gates {
            ctx = tape.mul_axis1(ctx, gp.head_gates[layer])?;
        }
        let ctx = tape.swap_axes(ctx, 1, 2)?; // [b, l1, h, dk]
        let ctx = tape.reshape(ctx, vec![b, l1, d])?;
        let proj = linear(tape, ctx, p(&format!("{pre}.attn.wo.weight")), p(&format!("{pre}.attn.wo.bias")), rows, d)?;
        let proj = tape.reshape(proj, vec![b, l1, d])?;
        x = tape.add(x, proj)?;

        // Feed-forward block, pre-norm.
        let hx = tape.layer_norm(x, p(&format!("{pre}.ln2.scale")), p(&format!("{pre}.ln2.bias")))?;
        let f = linear(tape, hx, p(&format!("{pre}.ff.w1.weight")), p(&format!("{pre}.ff.w1.bias")), rows, d)?;
        let mut f = activation(tape, *act, f)?; // [b*l1, d_ff]
        if let Some(gp) = gates {
            f = tape.mul(f, gp.ff_gates[layer])?;
        }
        let f = linear(tape, f, p(&format!("{pre}.ff.w2.weight")), p(&format!("{pre}.ff.w2.bias")), rows, *d_ff)?;
        let f = tape.reshape(f, vec![b, l1, d])?;
        x = tape.add(x, f)?;
    }

    let x = tape.layer_norm(x, p("ln_out.scale"), p("ln_out.bias"))?;
    let cls = tape.take_axis1(x, 0)?; // [b, d]
    let y = tape.matmul(cls, p("head.weight"))?;
    tape.add(y, p("head.bias"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Activation, ModelSpec};

    fn tiny_mlp() -> ParamStore {
        build_model(&ModelSpec::Mlp {
            in_dim: 2,
            hidden: vec![4],
            n_classes: 2,
            activation: Activation::Tanh,
            init_seed: 3,
        })
        .unwrap()
    }

    fn feature_batch(rows: Vec<f64>, labels: Vec<usize>) -> Batch {
        let n = labels.len();
        Batch {
            inputs: BatchInputs::Features(Tensor::new(vec![n, rows.len() / n], rows).unwrap()),
            labels,
        }
    }

    #[test]
    fn uniform_logits_give_ln2_loss() {
        // Zero out every parameter: logits collapse to the zero vector.
        let mut ps = tiny_mlp();
        for i in 0..ps.len() {
            ps.tensor_mut(i).data_mut().fill(0.0);
        }
        let batch = feature_batch(vec![0.3, -0.4, 1.0, 0.2], vec![0, 1]);
        let (pass, _) = model_forward(&ps, &batch, LossKind::CrossEntropy).unwrap();
        assert!((pass.tape.value(pass.loss).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_score_full_accuracy() {
        let logits = Tensor::new(vec![2, 2], vec![10.0, -10.0, -10.0, 10.0]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1]), 1.0);
        assert_eq!(accuracy(&logits, &[1, 0]), 0.0);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let ps = tiny_mlp();
        let batch = feature_batch(vec![0.0, 0.0], vec![5]);
        assert!(model_forward(&ps, &batch, LossKind::CrossEntropy).is_err());
        assert!(model_forward(&ps, &batch, LossKind::Mse).is_err());
    }

    #[test]
    fn forward_does_not_mutate_params() {
        let ps = tiny_mlp();
        let before = ps.to_flat();
        let batch = feature_batch(vec![0.5, -0.5], vec![1]);
        let (pass, _) = model_forward(&ps, &batch, LossKind::CrossEntropy).unwrap();
        pass.tape.backward(pass.loss).unwrap();
        assert_eq!(ps.to_flat(), before);
    }

    #[test]
    fn matches_straight_line_reimplementation() {
        // Independent oracle: the same two-layer tanh MLP computed with plain
        // loops, including the stable log-sum-exp cross entropy.
        let ps = tiny_mlp();
        let inputs = [[0.3, -0.7], [1.2, 0.4], [-0.9, 0.1]];
        let labels = [0usize, 1, 1];
        let w0 = ps.by_name("layer0.weight").unwrap().tensor.data();
        let b0 = ps.by_name("layer0.bias").unwrap().tensor.data();
        let w1 = ps.by_name("head.weight").unwrap().tensor.data();
        let b1 = ps.by_name("head.bias").unwrap().tensor.data();
        let mut expected = 0.0;
        for (row, &y) in inputs.iter().zip(&labels) {
            let mut hid = [0.0f64; 4];
            for j in 0..4 {
                let mut acc = b0[j];
                for i in 0..2 {
                    acc += row[i] * w0[i * 4 + j];
                }
                hid[j] = acc.tanh();
            }
            let mut logit = [0.0f64; 2];
            for c in 0..2 {
                let mut acc = b1[c];
                for j in 0..4 {
                    acc += hid[j] * w1[j * 2 + c];
                }
                logit[c] = acc;
            }
            let m = logit[0].max(logit[1]);
            let lse = m + ((logit[0] - m).exp() + (logit[1] - m).exp()).ln();
            expected += lse - logit[y];
        }
        expected /= labels.len() as f64;

        let batch = feature_batch(inputs.iter().flatten().copied().collect(), labels.to_vec());
        let (pass, _) = model_forward(&ps, &batch, LossKind::CrossEntropy).unwrap();
        let got = pass.tape.value(pass.loss).item();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn transformer_forward_shapes_and_determinism() {
        let spec = ModelSpec::Transformer {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab: 3,
            max_len: 6,
            n_classes: 2,
            activation: Activation::Gelu,
            init_seed: 11,
        };
        let ps = build_model(&spec).unwrap();
        let batch = Batch {
            inputs: BatchInputs::Tokens {
                ids: vec![0, 1, 1, 0, 1, 0, 1, 1, 0, 0, 0, 1],
                batch: 2,
                seq_len: 6,
            },
            labels: vec![1, 0],
        };
        let run = || {
            let (pass, _) = model_forward(&ps, &batch, LossKind::CrossEntropy).unwrap();
            let v = pass.tape.value(pass.logits).clone();
            (v.shape().to_vec(), pass.tape.value(pass.loss).item().to_bits(), v)
        };
        let (shape, bits_a, _) = run();
        let (_, bits_b, _) = run();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(bits_a, bits_b);
    }
}
