//! Model definitions: an MLP classifier and a small transformer-encoder
//! classifier, both backed by a named parameter registry with prunable flags.

pub(crate) mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use forward::{
    accuracy, build_forward, model_forward, Batch, BatchInputs, ForwardPass, GatePlan, LossKind,
};

use std::collections::HashMap;

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Gelu,
}

/// Architecture description. Everything needed to rebuild the parameter
/// registry deterministically, including the init seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    Mlp {
        in_dim: usize,
        hidden: Vec<usize>,
        n_classes: usize,
        activation: Activation,
        init_seed: u64,
    },
    Transformer {
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        d_ff: usize,
        /// Data vocabulary size; the embedding table holds one extra row used
        /// as the sequence-level readout token.
        vocab: usize,
        max_len: usize,
        n_classes: usize,
        activation: Activation,
        init_seed: u64,
    },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ModelSpec::Mlp { in_dim, hidden, n_classes, .. } => {
                if *in_dim == 0 || *n_classes == 0 {
                    return Err(ModelError::InvalidSpec("zero dimension".into()));
                }
                if hidden.is_empty() {
                    return Err(ModelError::InvalidSpec(
                        "mlp needs at least one hidden layer".into(),
                    ));
                }
                if hidden.iter().any(|&h| h == 0) {
                    return Err(ModelError::InvalidSpec("zero-width hidden layer".into()));
                }
            }
            ModelSpec::Transformer {
                n_layers, n_heads, d_model, d_ff, vocab, max_len, n_classes, ..
            } => {
                for (name, v) in [
                    ("n_layers", *n_layers),
                    ("n_heads", *n_heads),
                    ("d_model", *d_model),
                    ("d_ff", *d_ff),
                    ("vocab", *vocab),
                    ("max_len", *max_len),
                    ("n_classes", *n_classes),
                ] {
                    if v == 0 {
                        return Err(ModelError::InvalidSpec(format!("{name} must be >= 1")));
                    }
                }
                if d_model % n_heads != 0 {
                    return Err(ModelError::InvalidSpec(format!(
                        "d_model {d_model} not divisible by n_heads {n_heads}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        match self {
            ModelSpec::Mlp { n_classes, .. } | ModelSpec::Transformer { n_classes, .. } => {
                *n_classes
            }
        }
    }

    pub fn init_seed(&self) -> u64 {
        match self {
            ModelSpec::Mlp { init_seed, .. } | ModelSpec::Transformer { init_seed, .. } => {
                *init_seed
            }
        }
    }

    pub fn with_init_seed(mut self, seed: u64) -> Self {
        match &mut self {
            ModelSpec::Mlp { init_seed, .. } | ModelSpec::Transformer { init_seed, .. } => {
                *init_seed = seed;
            }
        }
        self
    }

    pub fn activation(&self) -> Activation {
        match self {
            ModelSpec::Mlp { activation, .. } | ModelSpec::Transformer { activation, .. } => {
                *activation
            }
        }
    }
}

/// What role a parameter plays; drives pruning and quantization scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// 2-D weight of a linear/attention/feed-forward map.
    LinearWeight,
    Bias,
    Embedding,
    NormScale,
    NormBias,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub prunable: bool,
    pub kind: ParamKind,
}

/// Ordered, named collection of parameter tensors. Iteration order is fixed
/// at construction and preserved by checkpoint round-trips.
#[derive(Debug, Clone)]
pub struct ParamStore {
    spec: ModelSpec,
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn new(spec: ModelSpec) -> Self {
        ParamStore { spec, entries: Vec::new(), index: HashMap::new() }
    }

    /// Assemble a store from explicit entries. Intended for synthetic test
    /// functions; such stores do not round-trip through checkpoints unless
    /// the entries match what `build_model(spec)` would produce.
    pub fn from_entries(spec: ModelSpec, entries: Vec<ParamEntry>) -> Self {
        let mut ps = ParamStore::new(spec);
        for e in entries {
            ps.push(&e.name.clone(), e.tensor, e.prunable, e.kind);
        }
        ps
    }

    fn push(&mut self, name: &str, tensor: Tensor, prunable: bool, kind: ParamKind) {
        debug_assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), tensor, prunable, kind });
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &ParamEntry {
        &self.entries[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].tensor
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn coord_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Number of prunable scalar parameters. This is the denominator used
    /// everywhere sparsity is reported.
    pub fn prunable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.prunable).map(|e| e.tensor.numel()).sum()
    }

    pub fn prunable_indices(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].prunable).collect()
    }

    /// All parameter values flattened in registry order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.coord_count());
        for e in &self.entries {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    /// Overwrite all parameter values from a flat vector in registry order.
    pub fn load_flat(&mut self, flat: &[f64]) {
        debug_assert_eq!(flat.len(), self.coord_count());
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.tensor.numel();
            e.tensor.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Exact bitwise equality of all parameter values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Build and deterministically initialize a model from its spec.
///
/// Weights get uniform Kaiming-style fan-in scaling, biases start at zero,
/// normalization scales at one. Identical specs produce bit-identical stores.
pub fn build_model(spec: &ModelSpec) -> Result<ParamStore, ModelError> {
    spec.validate()?;
    let mut rng = Rng::new(spec.init_seed());
    let mut ps = ParamStore::new(spec.clone());

    let linear = |ps: &mut ParamStore, rng: &mut Rng, name: &str, din: usize, dout: usize, prunable: bool| {
        let bound = (6.0 / din as f64).sqrt();
        let w = Tensor::from_fn(vec![din, dout], |_| rng.range(-bound, bound));
        ps.push(&format!("{name}.weight"), w, prunable, ParamKind::LinearWeight);
        ps.push(&format!("{name}.bias"), Tensor::zeros(vec![dout]), false, ParamKind::Bias);
    };

    match spec {
        ModelSpec::Mlp { in_dim, hidden, n_classes, .. } => {
            let mut din = *in_dim;
            for (i, &h) in hidden.iter().enumerate() {
                linear(&mut ps, &mut rng, &format!("layer{i}"), din, h, true);
                din = h;
            }
            linear(&mut ps, &mut rng, "head", din, *n_classes, false);
        }
        ModelSpec::Transformer {
            n_layers, n_heads: _, d_model, d_ff, vocab, max_len, n_classes, ..
        } => {
            let d = *d_model;
            let bound = (3.0 / d as f64).sqrt();
            // Row `vocab` of the token table is the readout token prepended to
            // every sequence; positions therefore run to max_len + 1.
            let tok = Tensor::from_fn(vec![vocab + 1, d], |_| rng.range(-bound, bound));
            ps.push("embed.token", tok, false, ParamKind::Embedding);
            let pos = Tensor::from_fn(vec![max_len + 1, d], |_| rng.range(-bound, bound));
            ps.push("embed.pos", pos, false, ParamKind::Embedding);
            for l in 0..*n_layers {
                let p = format!("enc{l}");
                ps.push(&format!("{p}.ln1.scale"), Tensor::full(vec![d], 1.0), false, ParamKind::NormScale);
                ps.push(&format!("{p}.ln1.bias"), Tensor::zeros(vec![d]), false, ParamKind::NormBias);
                linear(&mut ps, &mut rng, &format!("{p}.attn.wq"), d, d, true);
                linear(&mut ps, &mut rng, &format!("{p}.attn.wk"), d, d, true);
                linear(&mut ps, &mut rng, &format!("{p}.attn.wv"), d, d, true);
                linear(&mut ps, &mut rng, &format!("{p}.attn.wo"), d, d, true);
                ps.push(&format!("{p}.ln2.scale"), Tensor::full(vec![d], 1.0), false, ParamKind::NormScale);
                ps.push(&format!("{p}.ln2.bias"), Tensor::zeros(vec![d]), false, ParamKind::NormBias);
                linear(&mut ps, &mut rng, &format!("{p}.ff.w1"), d, *d_ff, true);
                linear(&mut ps, &mut rng, &format!("{p}.ff.w2"), *d_ff, d, true);
            }
            ps.push("ln_out.scale", Tensor::full(vec![d], 1.0), false, ParamKind::NormScale);
            ps.push("ln_out.bias", Tensor::zeros(vec![d]), false, ParamKind::NormBias);
            linear(&mut ps, &mut rng, "head", d, *n_classes, false);
        }
    }
    Ok(ps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_spec() -> ModelSpec {
        ModelSpec::Mlp {
            in_dim: 2,
            hidden: vec![16],
            n_classes: 2,
            activation: Activation::Relu,
            init_seed: 7,
        }
    }

    #[test]
    fn build_is_deterministic_bitwise() {
        let a = build_model(&mlp_spec()).unwrap();
        let b = build_model(&mlp_spec()).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn different_seeds_differ() {
        let a = build_model(&mlp_spec()).unwrap();
        let b = build_model(&mlp_spec().with_init_seed(8)).unwrap();
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn zero_hidden_layers_is_rejected() {
        let spec = ModelSpec::Mlp {
            in_dim: 2,
            hidden: vec![],
            n_classes: 2,
            activation: Activation::Relu,
            init_seed: 1,
        };
        assert!(build_model(&spec).is_err());
    }

    #[test]
    fn d_model_must_divide_by_heads() {
        let spec = ModelSpec::Transformer {
            n_layers: 1,
            n_heads: 3,
            d_model: 32,
            d_ff: 64,
            vocab: 3,
            max_len: 16,
            n_classes: 2,
            activation: Activation::Gelu,
            init_seed: 1,
        };
        assert!(build_model(&spec).is_err());
    }

    #[test]
    fn transformer_prunable_count_matches_formula() {
        let spec = ModelSpec::Transformer {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 64,
            vocab: 3,
            max_len: 16,
            n_classes: 2,
            activation: Activation::Gelu,
            init_seed: 5,
        };
        let ps = build_model(&spec).unwrap();
        let expected = 2 * (4 * 32 * 32 + 32 * 64 + 64 * 32);
        assert_eq!(ps.prunable_count(), expected);
        assert_eq!(expected, 16384);
        // Head, biases, embeddings and norms are excluded from the prunable set.
        for e in ps.entries() {
            if e.prunable {
                assert_eq!(e.kind, ParamKind::LinearWeight);
                assert!(!e.name.starts_with("head."));
                assert_eq!(e.tensor.rank(), 2);
            }
        }
    }

    #[test]
    fn mlp_head_is_not_prunable() {
        let ps = build_model(&mlp_spec()).unwrap();
        assert!(!ps.by_name("head.weight").unwrap().prunable);
        assert!(ps.by_name("layer0.weight").unwrap().prunable);
        assert_eq!(ps.prunable_count(), 2 * 16);
    }

    #[test]
    fn flat_round_trip_preserves_values() {
        let ps = build_model(&mlp_spec()).unwrap();
        let flat = ps.to_flat();
        assert_eq!(flat.len(), ps.coord_count());
        let mut other = build_model(&mlp_spec().with_init_seed(99)).unwrap();
        other.load_flat(&flat);
        assert!(other
            .entries()
            .iter()
            .zip(ps.entries())
            .all(|(a, b)| a.tensor.data() == b.tensor.data()));
    }
}
