//! Post-training dynamic int8 quantization. Linear-layer weights are mapped
//! to symmetric int8 once; activations are quantized asymmetrically per
//! tensor at each linear op during inference. Everything else (embeddings,
//! normalization, nonlinearities, attention mixing) stays in full precision.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::data::Dataset;
use crate::model::checkpoint::{
    read_spec, split_checked_payload, write_spec, ByteReader, ByteWriter,
};
use crate::model::{Batch, BatchInputs, CheckpointError, ModelSpec, ParamKind, ParamStore};
use crate::tensor::{gelu_fwd, softmax_row, Tensor};

pub const FQNT_MAGIC: &[u8; 5] = b"FQNT1";
pub const FQNT_VERSION: u32 = 1;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("non-finite weight in {0}")]
    NonFiniteWeight(String),
    #[error("accumulator saturated: |{0}| exceeds the exact integer range")]
    Saturated(i64),
    #[error("quantized model is missing parameter {0}")]
    MissingParam(String),
    #[error("{0} stored with the wrong precision tag")]
    WrongPayload(String),
    #[error(transparent)]
    File(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

pub type Result<T> = std::result::Result<T, QuantError>;

/// Symmetric per-tensor int8 weights: `dequantized = scale * (q - zero_point)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub q: Vec<i8>,
    pub scale: f64,
    pub zero_point: i32,
    pub shape: Vec<usize>,
}

impl QuantTensor {
    /// Symmetric quantization: scale = max|w| / 127 (or 1 for an all-zero
    /// tensor), zero point 0, round half to even, clamp to [-127, 127].
    pub fn quantize_symmetric(name: &str, t: &Tensor) -> Result<Self> {
        if !t.is_finite() {
            return Err(QuantError::NonFiniteWeight(name.to_string()));
        }
        let maxabs = t.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let scale = if maxabs == 0.0 { 1.0 } else { maxabs / 127.0 };
        let q = t
            .data()
            .iter()
            .map(|&v| (v / scale).round_ties_even().clamp(-127.0, 127.0) as i8)
            .collect();
        Ok(QuantTensor { q, scale, zero_point: 0, shape: t.shape().to_vec() })
    }

    pub fn numel(&self) -> usize {
        self.q.len()
    }

    pub fn dequantize(&self) -> Tensor {
        let zp = self.zero_point as f64;
        let data = self.q.iter().map(|&v| self.scale * (v as f64 - zp)).collect();
        Tensor::new(self.shape.clone(), data).unwrap()
    }
}

/// Asymmetric per-tensor activation quantization for one inference.
struct QuantActivations {
    q: Vec<i32>,
    scale: f64,
    zero_point: i32,
}

fn quantize_activations(x: &[f64]) -> QuantActivations {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in x {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let (scale, zero_point) = if hi == lo {
        (1.0, 0)
    } else {
        let scale = (hi - lo) / 255.0;
        let zp = -128 - (lo / scale).round_ties_even() as i32;
        (scale, zp)
    };
    let q = x
        .iter()
        .map(|&v| ((v / scale).round_ties_even() as i32 + zero_point).clamp(-128, 127))
        .collect();
    QuantActivations { q, scale, zero_point }
}

#[derive(Debug, Clone)]
enum Payload {
    Full(Tensor),
    Quant(QuantTensor),
}

/// A model with int8 linear weights and full-precision everything else.
/// Structure mirrors the source parameter store one-to-one.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    spec: ModelSpec,
    names: Vec<String>,
    payloads: Vec<Payload>,
    index: HashMap<String, usize>,
}

/// Observability counters from one integer-matmul inference pass.
#[derive(Debug, Default, Clone, Copy)]
pub struct QuantStats {
    pub max_abs_accumulator: i64,
}

/// Quantize every linear-layer weight of a store (hidden layers, attention
/// and feed-forward projections, and the classifier head).
pub fn quantize_weights(ps: &ParamStore) -> Result<QuantizedModel> {
    let mut names = Vec::with_capacity(ps.len());
    let mut payloads = Vec::with_capacity(ps.len());
    let mut index = HashMap::new();
    for e in ps.entries() {
        let payload = match e.kind {
            ParamKind::LinearWeight => {
                Payload::Quant(QuantTensor::quantize_symmetric(&e.name, &e.tensor)?)
            }
            _ => {
                if !e.tensor.is_finite() {
                    return Err(QuantError::NonFiniteWeight(e.name.clone()));
                }
                Payload::Full(e.tensor.clone())
            }
        };
        index.insert(e.name.clone(), names.len());
        names.push(e.name.clone());
        payloads.push(payload);
    }
    Ok(QuantizedModel { spec: ps.spec().clone(), names, payloads, index })
}

impl QuantizedModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn full(&self, name: &str) -> Result<&Tensor> {
        let i = *self.index.get(name).ok_or_else(|| QuantError::MissingParam(name.into()))?;
        match &self.payloads[i] {
            Payload::Full(t) => Ok(t),
            Payload::Quant(_) => Err(QuantError::WrongPayload(name.into())),
        }
    }

    fn quant(&self, name: &str) -> Result<&QuantTensor> {
        let i = *self.index.get(name).ok_or_else(|| QuantError::MissingParam(name.into()))?;
        match &self.payloads[i] {
            Payload::Quant(t) => Ok(t),
            Payload::Full(_) => Err(QuantError::WrongPayload(name.into())),
        }
    }

    pub fn quantized_names(&self) -> Vec<&str> {
        self.names
            .iter()
            .zip(&self.payloads)
            .filter(|(_, p)| matches!(p, Payload::Quant(_)))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.buf.extend_from_slice(FQNT_MAGIC);
        w.u32(FQNT_VERSION);
        write_spec(&mut w, &self.spec);
        w.u32(self.names.len() as u32);
        for (name, payload) in self.names.iter().zip(&self.payloads) {
            w.str(name);
            match payload {
                Payload::Full(t) => {
                    w.u8(0);
                    w.u32(t.rank() as u32);
                    for &d in t.shape() {
                        w.u32(d as u32);
                    }
                    w.f64_slice(t.data());
                }
                Payload::Quant(t) => {
                    w.u8(1);
                    w.u32(t.shape.len() as u32);
                    for &d in &t.shape {
                        w.u32(d as u32);
                    }
                    w.f64(t.scale);
                    w.i32(t.zero_point);
                    for &v in &t.q {
                        w.u8(v as u8);
                    }
                }
            }
        }
        w.finish_with_crc()
    }

    pub fn decode(raw: &[u8]) -> Result<Self> {
        if raw.len() < FQNT_MAGIC.len() || &raw[..FQNT_MAGIC.len()] != FQNT_MAGIC {
            return Err(QuantError::File(CheckpointError::BadMagic));
        }
        let payload = split_checked_payload(raw)?;
        let mut r = ByteReader::new(&payload[FQNT_MAGIC.len()..]);
        let version = r.u32()?;
        if version != FQNT_VERSION {
            return Err(QuantError::File(CheckpointError::Version(version)));
        }
        let spec = read_spec(&mut r)?;
        let n = r.u32()? as usize;
        let mut names = Vec::with_capacity(n);
        let mut payloads = Vec::with_capacity(n);
        let mut index = HashMap::new();
        for _ in 0..n {
            let name = r.str()?;
            let tag = r.u8()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let p = match tag {
                0 => Payload::Full(
                    Tensor::new(shape, r.f64_vec(numel)?)
                        .map_err(|e| CheckpointError::Malformed(e.to_string()))?,
                ),
                1 => {
                    let scale = r.f64()?;
                    let zero_point = r.i32()?;
                    let q = r.i8_vec(numel)?;
                    Payload::Quant(QuantTensor { q, scale, zero_point, shape })
                }
                other => {
                    return Err(QuantError::File(CheckpointError::Malformed(format!(
                        "unknown payload tag {other}"
                    ))))
                }
            };
            index.insert(name.clone(), names.len());
            names.push(name);
            payloads.push(p);
        }
        Ok(QuantizedModel { spec, names, payloads, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        crate::util::write_atomic(path, |f| f.write_all(&bytes)).map_err(CheckpointError::Io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(CheckpointError::Io)?;
        QuantizedModel::decode(&raw)
    }
}

/// Integer linear layer: dynamic activation quantization, exact integer
/// accumulation, dequantized f64 output plus full-precision bias.
fn quant_linear(
    x: &[f64],
    rows: usize,
    din: usize,
    w: &QuantTensor,
    bias: &[f64],
    stats: &mut QuantStats,
) -> Result<Vec<f64>> {
    debug_assert_eq!(w.shape, vec![din, bias.len()]);
    let dout = bias.len();
    let act = quantize_activations(x);
    let za = act.zero_point as i64;
    let mut out = vec![0.0; rows * dout];
    let out_scale = act.scale * w.scale;
    let mut acc = vec![0i64; dout];
    for i in 0..rows {
        let xrow = &act.q[i * din..(i + 1) * din];
        acc.iter_mut().for_each(|a| *a = 0);
        for (k, &qa) in xrow.iter().enumerate() {
            let a = qa as i64 - za;
            if a == 0 {
                continue;
            }
            let wrow = &w.q[k * dout..(k + 1) * dout];
            for (j, &qw) in wrow.iter().enumerate() {
                acc[j] += a * qw as i64;
            }
        }
        let orow = &mut out[i * dout..(i + 1) * dout];
        for (j, &a) in acc.iter().enumerate() {
            stats.max_abs_accumulator = stats.max_abs_accumulator.max(a.abs());
            if a.abs() > (1i64 << 53) {
                return Err(QuantError::Saturated(a));
            }
            orow[j] = out_scale * a as f64 + bias[j];
        }
    }
    Ok(out)
}

fn layer_norm_rows(x: &mut [f64], d: usize, gamma: &[f64], beta: &[f64]) {
    for row in x.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = gamma[j] * ((*v - mean) * inv) + beta[j];
        }
    }
}

fn activation_rows(x: &mut [f64], act: crate::model::Activation) {
    for v in x.iter_mut() {
        *v = match act {
            crate::model::Activation::Relu => v.max(0.0),
            crate::model::Activation::Tanh => v.tanh(),
            crate::model::Activation::Gelu => gelu_fwd(*v),
        };
    }
}

/// Full inference pass over a batch: logits, mean cross-entropy, accuracy.
pub fn quant_forward(qm: &QuantizedModel, batch: &Batch) -> Result<(Tensor, f64, f64, QuantStats)> {
    let mut stats = QuantStats::default();
    let logits = match &qm.spec {
        ModelSpec::Mlp { hidden, activation, .. } => {
            let BatchInputs::Features(feats) = &batch.inputs else {
                return Err(QuantError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                    op: "quant_forward",
                    lhs: vec![],
                    rhs: vec![],
                }));
            };
            let rows = batch.len();
            let mut x = feats.data().to_vec();
            let mut din = feats.shape()[1];
            for (i, &h) in hidden.iter().enumerate() {
                let w = qm.quant(&format!("layer{i}.weight"))?;
                let b = qm.full(&format!("layer{i}.bias"))?;
                x = quant_linear(&x, rows, din, w, b.data(), &mut stats)?;
                activation_rows(&mut x, *activation);
                din = h;
            }
            let w = qm.quant("head.weight")?;
            let b = qm.full("head.bias")?;
            let out = quant_linear(&x, rows, din, w, b.data(), &mut stats)?;
            Tensor::new(vec![rows, b.numel()], out)?
        }
        ModelSpec::Transformer {
            n_layers, n_heads, d_model, d_ff, vocab, activation, n_classes, ..
        } => {
            let BatchInputs::Tokens { ids, batch: bsz, seq_len } = &batch.inputs else {
                return Err(QuantError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                    op: "quant_forward",
                    lhs: vec![],
                    rhs: vec![],
                }));
            };
            let (b, d, h) = (*bsz, *d_model, *n_heads);
            let dk = d / h;
            let l1 = seq_len + 1;
            let rows = b * l1;

            let tok = qm.full("embed.token")?;
            let pos = qm.full("embed.pos")?;
            let mut x = vec![0.0; rows * d];
            for r in 0..b {
                for t in 0..l1 {
                    let id = if t == 0 { *vocab } else { ids[r * seq_len + t - 1] };
                    let src = &tok.data()[id * d..(id + 1) * d];
                    let dst = &mut x[(r * l1 + t) * d..(r * l1 + t + 1) * d];
                    for j in 0..d {
                        dst[j] = src[j] + pos.data()[t * d + j];
                    }
                }
            }

            for layer in 0..*n_layers {
                let pre = format!("enc{layer}");
                let mut hx = x.clone();
                layer_norm_rows(
                    &mut hx,
                    d,
                    qm.full(&format!("{pre}.ln1.scale"))?.data(),
                    qm.full(&format!("{pre}.ln1.bias"))?.data(),
                );
                let q = quant_linear(
                    &hx,
                    rows,
                    d,
                    qm.quant(&format!("{pre}.attn.wq.weight"))?,
                    qm.full(&format!("{pre}.attn.wq.bias"))?.data(),
                    &mut stats,
                )?;
                let k = quant_linear(
                    &hx,
                    rows,
                    d,
                    qm.quant(&format!("{pre}.attn.wk.weight"))?,
                    qm.full(&format!("{pre}.attn.wk.bias"))?.data(),
                    &mut stats,
                )?;
                let v = quant_linear(
                    &hx,
                    rows,
                    d,
                    qm.quant(&format!("{pre}.attn.wv.weight"))?,
                    qm.full(&format!("{pre}.attn.wv.bias"))?.data(),
                    &mut stats,
                )?;

                // Attention mixing in full precision.
                let mut ctx = vec![0.0; rows * d];
                let scale = 1.0 / (dk as f64).sqrt();
                let mut scores = vec![0.0; l1 * l1];
                for bi in 0..b {
                    for hi in 0..h {
                        let off = hi * dk;
                        for ti in 0..l1 {
                            let qrow =
                                &q[(bi * l1 + ti) * d + off..(bi * l1 + ti) * d + off + dk];
                            for tj in 0..l1 {
                                let krow =
                                    &k[(bi * l1 + tj) * d + off..(bi * l1 + tj) * d + off + dk];
                                let dot: f64 =
                                    qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum();
                                scores[ti * l1 + tj] = dot * scale;
                            }
                        }
                        for ti in 0..l1 {
                            softmax_row(&mut scores[ti * l1..(ti + 1) * l1]);
                        }
                        for ti in 0..l1 {
                            let out = &mut ctx
                                [(bi * l1 + ti) * d + off..(bi * l1 + ti) * d + off + dk];
                            for tj in 0..l1 {
                                let wgt = scores[ti * l1 + tj];
                                let vrow =
                                    &v[(bi * l1 + tj) * d + off..(bi * l1 + tj) * d + off + dk];
                                for jj in 0..dk {
                                    out[jj] += wgt * vrow[jj];
                                }
                            }
                        }
                    }
                }
                let proj = quant_linear(
                    &ctx,
                    rows,
                    d,
                    qm.quant(&format!("{pre}.attn.wo.weight"))?,
                    qm.full(&format!("{pre}.attn.wo.bias"))?.data(),
                    &mut stats,
                )?;
                for (xi, pi) in x.iter_mut().zip(&proj) {
                    *xi += pi;
                }

                let mut hx = x.clone();
                layer_norm_rows(
                    &mut hx,
                    d,
                    qm.full(&format!("{pre}.ln2.scale"))?.data(),
                    qm.full(&format!("{pre}.ln2.bias"))?.data(),
                );
                let mut f = quant_linear(
                    &hx,
                    rows,
                    d,
                    qm.quant(&format!("{pre}.ff.w1.weight"))?,
                    qm.full(&format!("{pre}.ff.w1.bias"))?.data(),
                    &mut stats,
                )?;
                activation_rows(&mut f, *activation);
                let f = quant_linear(
                    &f,
                    rows,
                    *d_ff,
                    qm.quant(&format!("{pre}.ff.w2.weight"))?,
                    qm.full(&format!("{pre}.ff.w2.bias"))?.data(),
                    &mut stats,
                )?;
                for (xi, fi) in x.iter_mut().zip(&f) {
                    *xi += fi;
                }
            }

            layer_norm_rows(
                &mut x,
                d,
                qm.full("ln_out.scale")?.data(),
                qm.full("ln_out.bias")?.data(),
            );
            let mut cls = vec![0.0; b * d];
            for bi in 0..b {
                cls[bi * d..(bi + 1) * d].copy_from_slice(&x[bi * l1 * d..bi * l1 * d + d]);
            }
            let w = qm.quant("head.weight")?;
            let bias = qm.full("head.bias")?;
            let out = quant_linear(&cls, b, d, w, bias.data(), &mut stats)?;
            Tensor::new(vec![b, *n_classes], out)?
        }
    };

    let mut loss = 0.0;
    let classes = *logits.shape().last().unwrap();
    for (i, &y) in batch.labels.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    loss /= batch.len() as f64;
    let metric = crate::model::accuracy(&logits, &batch.labels);
    Ok((logits, loss, metric, stats))
}

/// Paired float-vs-int8 evaluation on identical batches.
#[derive(Debug, Clone, Copy)]
pub struct ReportRow {
    pub float_metric: f64,
    pub quant_metric: f64,
    pub max_abs_logit_divergence: f64,
    pub max_abs_accumulator: i64,
}

pub fn quant_report(float_model: &ParamStore, qm: &QuantizedModel, ds: &Dataset) -> Result<ReportRow> {
    let mut float_correct = 0.0;
    let mut quant_correct = 0.0;
    let mut max_div = 0.0f64;
    let mut max_acc = 0i64;
    let mut n = 0usize;
    for batch in crate::data::ordered_batches(ds, 256)? {
        let (pass, fmetric) =
            crate::model::model_forward(float_model, &batch, crate::model::LossKind::CrossEntropy)?;
        let float_logits = pass.tape.value(pass.logits);
        let (qlogits, _, qmetric, stats) = quant_forward(qm, &batch)?;
        for (a, b) in float_logits.data().iter().zip(qlogits.data()) {
            max_div = max_div.max((a - b).abs());
        }
        max_acc = max_acc.max(stats.max_abs_accumulator);
        let bsz = batch.len() as f64;
        float_correct += fmetric * bsz;
        quant_correct += qmetric * bsz;
        n += batch.len();
    }
    Ok(ReportRow {
        float_metric: float_correct / n as f64,
        quant_metric: quant_correct / n as f64,
        max_abs_logit_divergence: max_div,
        max_abs_accumulator: max_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Activation, ModelSpec};
    use crate::rng::Rng;

    #[test]
    fn symmetric_quantization_example() {
        let t = Tensor::vector(vec![-1.0, 0.5, 1.0]);
        let q = QuantTensor::quantize_symmetric("w", &t).unwrap();
        assert_eq!(q.scale, 1.0 / 127.0);
        assert_eq!(q.zero_point, 0);
        assert_eq!(q.q, vec![-127, 64, 127]); // 0.5 * 127 = 63.5 rounds to even 64
    }

    #[test]
    fn all_zero_tensor_uses_unit_scale() {
        let t = Tensor::vector(vec![0.0; 8]);
        let q = QuantTensor::quantize_symmetric("w", &t).unwrap();
        assert_eq!(q.scale, 1.0);
        assert!(q.q.iter().all(|&v| v == 0));
    }

    #[test]
    fn round_trip_error_is_bounded_by_half_scale() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let t = Tensor::vector((0..64).map(|_| rng.normal() * 3.0).collect());
            let q = QuantTensor::quantize_symmetric("w", &t).unwrap();
            let back = q.dequantize();
            for (a, b) in t.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= q.scale / 2.0 + 1e-15, "{a} vs {b} scale {}", q.scale);
            }
        }
    }

    #[test]
    fn requantization_is_idempotent() {
        let mut rng = Rng::new(9);
        let t = Tensor::vector((0..32).map(|_| rng.normal()).collect());
        let q1 = QuantTensor::quantize_symmetric("w", &t).unwrap();
        let q2 = QuantTensor::quantize_symmetric("w", &q1.dequantize()).unwrap();
        assert_eq!(q1.q, q2.q);
    }

    #[test]
    fn integer_matmul_matches_float_accumulation_of_same_integers() {
        // The f64 oracle accumulates the identical integer products; both
        // sides are exact integers below 2^53, so equality is bitwise.
        let mut rng = Rng::new(3);
        let (rows, din, dout) = (7, 33, 11);
        let x: Vec<f64> = (0..rows * din).map(|_| rng.normal()).collect();
        let wt =
            Tensor::new(vec![din, dout], (0..din * dout).map(|_| rng.normal()).collect()).unwrap();
        let w = QuantTensor::quantize_symmetric("w", &wt).unwrap();
        let bias = vec![0.0; dout];
        let mut stats = QuantStats::default();
        let out = quant_linear(&x, rows, din, &w, &bias, &mut stats).unwrap();

        let act = quantize_activations(&x);
        for i in 0..rows {
            for j in 0..dout {
                let mut acc = 0.0f64;
                for k in 0..din {
                    let a = (act.q[i * din + k] - act.zero_point) as f64;
                    acc += a * w.q[k * dout + j] as f64;
                }
                let expect = act.scale * w.scale * acc;
                assert_eq!(out[i * dout + j].to_bits(), expect.to_bits());
            }
        }
        assert!(stats.max_abs_accumulator < 1 << 53);
    }

    #[test]
    fn one_by_one_linear_bound() {
        let wt = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let w = QuantTensor::quantize_symmetric("w", &wt).unwrap();
        let mut stats = QuantStats::default();
        let out = quant_linear(&[1.0], 1, 1, &w, &[0.0], &mut stats).unwrap();
        assert!((out[0] - 1.0).abs() <= 1.0 / 127.0 + 1.0 / 255.0, "{}", out[0]);
    }

    #[test]
    fn constant_integer_activations_pass_through_weight_error_only() {
        // max == min selects the degenerate rule (scale 1, zero point 0), so
        // integer-valued constants are represented exactly.
        let wt = Tensor::new(vec![2, 2], vec![0.5, -0.25, 1.0, 0.125]).unwrap();
        let w = QuantTensor::quantize_symmetric("w", &wt).unwrap();
        let wd = w.dequantize();
        let mut stats = QuantStats::default();
        let c = 2.0;
        let out = quant_linear(&[c, c], 1, 2, &w, &[0.0, 0.0], &mut stats).unwrap();
        for j in 0..2 {
            let expect = c * wd.data()[j] + c * wd.data()[2 + j];
            assert!((out[j] - expect).abs() < 1e-12, "{} vs {expect}", out[j]);
        }
    }

    #[test]
    fn quantized_model_mirrors_structure_and_round_trips() {
        let spec = ModelSpec::Transformer {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab: 3,
            max_len: 6,
            n_classes: 2,
            activation: Activation::Gelu,
            init_seed: 2,
        };
        let ps = build_model(&spec).unwrap();
        let qm = quantize_weights(&ps).unwrap();
        assert_eq!(qm.len(), ps.len());
        // Embeddings and norms stay full precision; projections and head don't.
        assert!(qm.full("embed.token").is_ok());
        assert!(qm.quant("enc0.attn.wq.weight").is_ok());
        assert!(qm.quant("head.weight").is_ok());
        assert!(qm.full("enc0.ln1.scale").is_ok());

        let bytes = qm.encode();
        let back = QuantizedModel::decode(&bytes).unwrap();
        assert_eq!(back.len(), qm.len());
        let a = back.quant("head.weight").unwrap();
        let b = qm.quant("head.weight").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quant_forward_stays_close_to_float_on_mlp() {
        let spec = ModelSpec::Mlp {
            in_dim: 2,
            hidden: vec![16],
            n_classes: 2,
            activation: Activation::Relu,
            init_seed: 8,
        };
        let ps = build_model(&spec).unwrap();
        let qm = quantize_weights(&ps).unwrap();
        let mut rng = Rng::new(4);
        let feats: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let batch = Batch {
            inputs: BatchInputs::Features(Tensor::new(vec![10, 2], feats).unwrap()),
            labels: vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1],
        };
        let (qlogits, _, _, _) = quant_forward(&qm, &batch).unwrap();
        let (pass, _) =
            crate::model::model_forward(&ps, &batch, crate::model::LossKind::CrossEntropy).unwrap();
        let flogits = pass.tape.value(pass.logits);
        for (a, b) in flogits.data().iter().zip(qlogits.data()) {
            assert!((a - b).abs() < 0.05, "logit divergence {a} vs {b}");
        }
    }

    #[test]
    fn transformer_quant_forward_runs_and_tracks_float() {
        let spec = ModelSpec::Transformer {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab: 3,
            max_len: 8,
            n_classes: 2,
            activation: Activation::Gelu,
            init_seed: 6,
        };
        let ps = build_model(&spec).unwrap();
        let qm = quantize_weights(&ps).unwrap();
        let batch = Batch {
            inputs: BatchInputs::Tokens {
                ids: vec![0, 1, 1, 0, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 1, 0],
                batch: 2,
                seq_len: 8,
            },
            labels: vec![1, 0],
        };
        let (qlogits, _, _, stats) = quant_forward(&qm, &batch).unwrap();
        let (pass, _) =
            crate::model::model_forward(&ps, &batch, crate::model::LossKind::CrossEntropy).unwrap();
        let flogits = pass.tape.value(pass.logits);
        for (a, b) in flogits.data().iter().zip(qlogits.data()) {
            assert!((a - b).abs() < 0.25, "logit divergence {a} vs {b}");
        }
        assert!(stats.max_abs_accumulator > 0);
    }
}
