//! Checkpoint persistence: `.fcpt` files.
//!
//! Layout (little-endian): magic "FCPT1", u32 version, model spec block,
//! metadata map, tensor records (length-prefixed name, u32 shape list, raw
//! f64 data), CRC32 trailer over everything before it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{build_model, Activation, ModelSpec, ParamStore};
use crate::tensor::Tensor;
use crate::util::write_atomic;

pub const FCPT_MAGIC: &[u8; 5] = b"FCPT1";
pub const FCPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("parameter {name} does not match spec: {reason}")]
    ParamMismatch { name: String, reason: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// A parameter snapshot plus provenance metadata (seed, task, optimizer, epoch).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Checkpoint { params, meta: BTreeMap::new() }
    }

    pub fn with_meta(params: ParamStore, meta: BTreeMap<String, String>) -> Self {
        Checkpoint { params, meta }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }
}

pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64_slice(&mut self, data: &[f64]) {
        self.buf.reserve(data.len() * 8);
        for &v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn finish_with_crc(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i32(&mut self) -> Result<i32, CheckpointError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Malformed("non-utf8 string".into()))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn i8_vec(&mut self, n: usize) -> Result<Vec<i8>, CheckpointError> {
        let bytes = self.take(n)?;
        Ok(bytes.iter().map(|&b| b as i8).collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        self.take(n)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Verifies the trailing CRC32 and returns the payload before it.
pub(crate) fn split_checked_payload(raw: &[u8]) -> Result<&[u8], CheckpointError> {
    if raw.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    let (payload, tail) = raw.split_at(raw.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    Ok(payload)
}

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Tanh => 1,
        Activation::Gelu => 2,
    }
}

fn activation_from_tag(t: u8) -> Result<Activation, CheckpointError> {
    match t {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Tanh),
        2 => Ok(Activation::Gelu),
        other => Err(CheckpointError::Malformed(format!("unknown activation tag {other}"))),
    }
}

pub(crate) fn write_spec(w: &mut ByteWriter, spec: &ModelSpec) {
    match spec {
        ModelSpec::Mlp { in_dim, hidden, n_classes, activation, init_seed } => {
            w.u8(0);
            w.u8(activation_tag(*activation));
            w.u32(*in_dim as u32);
            w.u32(*n_classes as u32);
            w.u32(hidden.len() as u32);
            for &h in hidden {
                w.u32(h as u32);
            }
            w.u64(*init_seed);
        }
        ModelSpec::Transformer {
            n_layers, n_heads, d_model, d_ff, vocab, max_len, n_classes, activation, init_seed,
        } => {
            w.u8(1);
            w.u8(activation_tag(*activation));
            for v in [n_layers, n_heads, d_model, d_ff, vocab, max_len, n_classes] {
                w.u32(*v as u32);
            }
            w.u64(*init_seed);
        }
    }
}

pub(crate) fn read_spec(r: &mut ByteReader) -> Result<ModelSpec, CheckpointError> {
    let kind = r.u8()?;
    let activation = activation_from_tag(r.u8()?)?;
    match kind {
        0 => {
            let in_dim = r.u32()? as usize;
            let n_classes = r.u32()? as usize;
            let n_hidden = r.u32()? as usize;
            let mut hidden = Vec::with_capacity(n_hidden);
            for _ in 0..n_hidden {
                hidden.push(r.u32()? as usize);
            }
            let init_seed = r.u64()?;
            Ok(ModelSpec::Mlp { in_dim, hidden, n_classes, activation, init_seed })
        }
        1 => {
            let n_layers = r.u32()? as usize;
            let n_heads = r.u32()? as usize;
            let d_model = r.u32()? as usize;
            let d_ff = r.u32()? as usize;
            let vocab = r.u32()? as usize;
            let max_len = r.u32()? as usize;
            let n_classes = r.u32()? as usize;
            let init_seed = r.u64()?;
            Ok(ModelSpec::Transformer {
                n_layers, n_heads, d_model, d_ff, vocab, max_len, n_classes, activation, init_seed,
            })
        }
        other => Err(CheckpointError::Malformed(format!("unknown model kind {other}"))),
    }
}

/// Serialize a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(FCPT_MAGIC);
    w.u32(FCPT_VERSION);
    write_spec(&mut w, ckpt.params.spec());
    w.u32(ckpt.meta.len() as u32);
    for (k, v) in &ckpt.meta {
        w.str(k);
        w.str(v);
    }
    w.u32(ckpt.params.len() as u32);
    for e in ckpt.params.entries() {
        w.str(&e.name);
        w.u32(e.tensor.rank() as u32);
        for &d in e.tensor.shape() {
            w.u32(d as u32);
        }
        w.f64_slice(e.tensor.data());
    }
    w.finish_with_crc()
}

/// Parse a checkpoint from bytes. The registry is rebuilt from the stored
/// spec, so ordering and prunable flags always match a fresh `build_model`.
pub fn decode_checkpoint(raw: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if raw.len() < FCPT_MAGIC.len() || &raw[..FCPT_MAGIC.len()] != FCPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(
        raw.get(5..9).ok_or(CheckpointError::Truncated)?.try_into().unwrap(),
    );
    if version != FCPT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let payload = split_checked_payload(raw)?;
    let mut r = ByteReader::new(&payload[9..]);

    let spec = read_spec(&mut r)?;
    let mut meta = BTreeMap::new();
    let n_meta = r.u32()?;
    for _ in 0..n_meta {
        let k = r.str()?;
        let v = r.str()?;
        meta.insert(k, v);
    }
    let mut params = build_model(&spec)
        .map_err(|e| CheckpointError::Malformed(format!("stored spec invalid: {e}")))?;
    let n_tensors = r.u32()? as usize;
    if n_tensors != params.len() {
        return Err(CheckpointError::Malformed(format!(
            "tensor count {n_tensors} does not match spec registry of {}",
            params.len()
        )));
    }
    for i in 0..n_tensors {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64_vec(numel)?;
        let expect = params.entry(i);
        if expect.name != name {
            return Err(CheckpointError::ParamMismatch {
                name,
                reason: format!("expected {} at position {i}", expect.name),
            });
        }
        if expect.tensor.shape() != shape.as_slice() {
            return Err(CheckpointError::ParamMismatch {
                name,
                reason: format!(
                    "shape {:?} does not match spec shape {:?}",
                    shape,
                    expect.tensor.shape()
                ),
            });
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        *params.tensor_mut(i) = tensor;
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Malformed("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint { params, meta })
}

/// Write a checkpoint atomically (temp file + rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(ckpt);
    write_atomic(path, |f| f.write_all(&bytes))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let raw = std::fs::read(path)?;
    decode_checkpoint(&raw)
}
