//! Deterministic synthetic task generators. Feature tasks are 2-D point
//! clouds; sequence tasks are fixed-length binary token strings. Splits draw
//! from disjoint seed streams and token tasks additionally deduplicate
//! sequences across splits.

use std::collections::HashSet;

use thiserror::Error;

use crate::model::{Batch, BatchInputs, ModelSpec};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown generator id {0:?}")]
    UnknownGenerator(String),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("empty dataset")]
    Empty,
    #[error("batch size must be >= 1")]
    BadBatchSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorId {
    Moons,
    Blobs,
    Rings,
    SeqMajority,
    SeqParity,
}

impl GeneratorId {
    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "moons" => Ok(GeneratorId::Moons),
            "blobs" => Ok(GeneratorId::Blobs),
            "rings" => Ok(GeneratorId::Rings),
            "seq-majority" => Ok(GeneratorId::SeqMajority),
            "seq-parity" => Ok(GeneratorId::SeqParity),
            other => Err(DataError::UnknownGenerator(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GeneratorId::Moons => "moons",
            GeneratorId::Blobs => "blobs",
            GeneratorId::Rings => "rings",
            GeneratorId::SeqMajority => "seq-majority",
            GeneratorId::SeqParity => "seq-parity",
        }
    }

    pub fn is_sequence(&self) -> bool {
        matches!(self, GeneratorId::SeqMajority | GeneratorId::SeqParity)
    }

    pub fn n_classes(&self) -> usize {
        match self {
            GeneratorId::Blobs => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub generator: GeneratorId,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise: f64,
    pub seed: u64,
    /// Token count per sequence; ignored by feature tasks.
    pub seq_len: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(DataError::InvalidSpec("noise must be finite and >= 0".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(DataError::InvalidSpec("all splits need n > 0".into()));
        }
        if self.generator.is_sequence() {
            if self.seq_len == 0 || self.seq_len > 32 {
                return Err(DataError::InvalidSpec("seq_len must be in 1..=32".into()));
            }
            // Leave rejection-sampling headroom: ties are excluded for the
            // majority task and every sequence is deduplicated across splits.
            let space = 1usize << self.seq_len;
            if self.n_train + self.n_val + self.n_test > space / 4 {
                return Err(DataError::InvalidSpec(format!(
                    "token space 2^{} too small for requested split sizes",
                    self.seq_len
                )));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.generator.n_classes()
    }

    pub fn task_id(&self) -> String {
        self.generator.name().to_string()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: BatchInputs,
    pub labels: Vec<usize>,
    pub task_id: String,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Batch {
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        let inputs = match &self.inputs {
            BatchInputs::Features(t) => {
                let d = t.shape()[1];
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
                }
                BatchInputs::Features(Tensor::new(vec![idx.len(), d], data).unwrap())
            }
            BatchInputs::Tokens { ids, seq_len, .. } => {
                let mut out = Vec::with_capacity(idx.len() * seq_len);
                for &i in idx {
                    out.extend_from_slice(&ids[i * seq_len..(i + 1) * seq_len]);
                }
                BatchInputs::Tokens { ids: out, batch: idx.len(), seq_len: *seq_len }
            }
        };
        Batch { inputs, labels }
    }

    /// The whole split as a single batch, in stored order.
    pub fn full_batch(&self) -> Batch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.select(&idx)
    }

    /// CSV dump: one row per example, feature columns (or token columns)
    /// then the label.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match &self.inputs {
            BatchInputs::Features(t) => {
                let d = t.shape()[1];
                for j in 0..d {
                    out.push_str(&format!("x{j},"));
                }
                out.push_str("label\n");
                for i in 0..self.len() {
                    for j in 0..d {
                        out.push_str(&format!("{},", t.data()[i * d + j]));
                    }
                    out.push_str(&format!("{}\n", self.labels[i]));
                }
            }
            BatchInputs::Tokens { ids, seq_len, .. } => {
                for j in 0..*seq_len {
                    out.push_str(&format!("t{j},"));
                }
                out.push_str("label\n");
                for i in 0..self.len() {
                    for j in 0..*seq_len {
                        out.push_str(&format!("{},", ids[i * seq_len + j]));
                    }
                    out.push_str(&format!("{}\n", self.labels[i]));
                }
            }
        }
        out
    }
}

/// Per-class sample counts that are exactly balanced up to remainder.
fn class_quota(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|c| n / k + usize::from(c < n % k)).collect()
}

/// Generate the train/val/test triple for a task spec.
pub fn generate(spec: &TaskSpec) -> Result<(Dataset, Dataset, Dataset), DataError> {
    spec.validate()?;
    if spec.generator.is_sequence() {
        let mut seen = HashSet::new();
        let train = gen_tokens(spec, Split::Train, spec.n_train, &mut seen);
        let val = gen_tokens(spec, Split::Val, spec.n_val, &mut seen);
        let test = gen_tokens(spec, Split::Test, spec.n_test, &mut seen);
        Ok((train, val, test))
    } else {
        let train = gen_features(spec, Split::Train, spec.n_train);
        let val = gen_features(spec, Split::Val, spec.n_val);
        let test = gen_features(spec, Split::Test, spec.n_test);
        Ok((train, val, test))
    }
}

fn gen_features(spec: &TaskSpec, split: Split, n: usize) -> Dataset {
    let mut rng = Rng::new(derive_seed(spec.seed, &format!("data/{}/{}", spec.task_id(), split.tag())));
    let k = spec.n_classes();
    let quota = class_quota(n, k);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in quota.iter().enumerate() {
        for _ in 0..count {
            let (x, y) = match spec.generator {
                GeneratorId::Moons => {
                    let t = rng.range(0.0, std::f64::consts::PI);
                    if class == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    }
                }
                GeneratorId::Rings => {
                    let t = rng.range(0.0, std::f64::consts::TAU);
                    let r = if class == 0 { 1.0 } else { 0.5 };
                    (r * t.cos(), r * t.sin())
                }
                GeneratorId::Blobs => {
                    const CENTERS: [(f64, f64); 3] =
                        [(0.0, 2.0), (1.732, -1.0), (-1.732, -1.0)];
                    CENTERS[class]
                }
                _ => unreachable!(),
            };
            let nx = x + spec.noise * rng.normal();
            let ny = y + spec.noise * rng.normal();
            data.push(nx);
            data.push(ny);
            labels.push(class);
        }
    }
    Dataset {
        inputs: BatchInputs::Features(Tensor::new(vec![n, 2], data).unwrap()),
        labels,
        task_id: spec.task_id(),
        split,
    }
}

fn token_key(tokens: &[usize]) -> u64 {
    tokens.iter().fold(0u64, |acc, &t| (acc << 1) | t as u64)
}

fn gen_tokens(spec: &TaskSpec, split: Split, n: usize, seen: &mut HashSet<u64>) -> Dataset {
    let mut rng = Rng::new(derive_seed(spec.seed, &format!("data/{}/{}", spec.task_id(), split.tag())));
    let l = spec.seq_len;
    let quota = class_quota(n, 2);
    let mut remaining = quota;
    let mut ids = Vec::with_capacity(n * l);
    let mut labels = Vec::with_capacity(n);
    let mut seq = vec![0usize; l];
    while labels.len() < n {
        for s in seq.iter_mut() {
            *s = (rng.next_u64() & 1) as usize;
        }
        let ones = seq.iter().filter(|&&t| t == 1).count();
        let label = match spec.generator {
            GeneratorId::SeqMajority => {
                if 2 * ones == l {
                    continue; // exact tie: resample
                }
                usize::from(2 * ones > l)
            }
            GeneratorId::SeqParity => ones % 2,
            _ => unreachable!(),
        };
        if remaining[label] == 0 {
            continue;
        }
        let key = token_key(&seq);
        if !seen.insert(key) {
            continue; // duplicate within or across splits
        }
        remaining[label] -= 1;
        ids.extend_from_slice(&seq);
        labels.push(label);
    }
    Dataset {
        inputs: BatchInputs::Tokens { ids, batch: n, seq_len: l },
        labels,
        task_id: spec.task_id(),
        split,
    }
}

/// Shuffled minibatches for one epoch. The permutation is drawn from
/// a per-epoch stream derived from (shuffle_seed, epoch); the last partial
/// batch is kept.
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>, DataError> {
    if batch_size == 0 {
        return Err(DataError::BadBatchSize);
    }
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let mut rng = Rng::new(derive_seed(shuffle_seed, &format!("shuffle/epoch{epoch}")));
    rng.shuffle(&mut idx);
    Ok(idx.chunks(batch_size).map(|c| ds.select(c)).collect())
}

/// Unshuffled minibatches in stored order, for evaluation.
pub fn ordered_batches(ds: &Dataset, batch_size: usize) -> Result<Vec<Batch>, DataError> {
    if batch_size == 0 {
        return Err(DataError::BadBatchSize);
    }
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    Ok(idx.chunks(batch_size).map(|c| ds.select(c)).collect())
}

/// Whether a model's input/output interface fits a task.
pub fn model_matches_task(spec: &ModelSpec, task: &TaskSpec) -> bool {
    match spec {
        ModelSpec::Mlp { in_dim, n_classes, .. } => {
            !task.generator.is_sequence() && *in_dim == 2 && *n_classes == task.n_classes()
        }
        ModelSpec::Transformer { vocab, max_len, n_classes, .. } => {
            task.generator.is_sequence()
                && *vocab >= 2
                && *max_len >= task.seq_len
                && *n_classes == task.n_classes()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moons_spec(n: usize, noise: f64, seed: u64) -> TaskSpec {
        TaskSpec {
            generator: GeneratorId::Moons,
            n_train: n,
            n_val: n,
            n_test: n,
            noise,
            seed,
            seq_len: 0,
        }
    }

    #[test]
    fn zero_noise_moons_lie_on_canonical_arcs() {
        let (train, _, _) = generate(&moons_spec(200, 0.0, 1)).unwrap();
        let BatchInputs::Features(t) = &train.inputs else { panic!() };
        for i in 0..train.len() {
            let (x, y) = (t.data()[i * 2], t.data()[i * 2 + 1]);
            let on_outer = (x * x + y * y - 1.0).abs() < 1e-12 && y >= -1e-12;
            let dx = x - 1.0;
            let dy = y - 0.5;
            let on_inner = (dx * dx + dy * dy - 1.0).abs() < 1e-12 && y <= 0.5 + 1e-12;
            match train.labels[i] {
                0 => assert!(on_outer, "point {i} off outer arc"),
                1 => assert!(on_inner, "point {i} off inner arc"),
                _ => panic!(),
            }
        }
    }

    #[test]
    fn parity_label_is_xor_of_tokens() {
        let seq = [1usize, 0, 1, 1, 0, 0, 0, 0];
        let ones = seq.iter().filter(|&&t| t == 1).count();
        assert_eq!(ones % 2, 1);
        // And the generator agrees with the rule on everything it emits.
        let spec = TaskSpec {
            generator: GeneratorId::SeqParity,
            n_train: 100,
            n_val: 50,
            n_test: 50,
            noise: 0.0,
            seed: 3,
            seq_len: 12,
        };
        let (train, _, _) = generate(&spec).unwrap();
        let BatchInputs::Tokens { ids, seq_len, .. } = &train.inputs else { panic!() };
        for i in 0..train.len() {
            let ones = ids[i * seq_len..(i + 1) * seq_len].iter().filter(|&&t| t == 1).count();
            assert_eq!(train.labels[i], ones % 2);
        }
    }

    #[test]
    fn majority_label_matches_count_rule() {
        let spec = TaskSpec {
            generator: GeneratorId::SeqMajority,
            n_train: 100,
            n_val: 50,
            n_test: 50,
            noise: 0.0,
            seed: 9,
            seq_len: 16,
        };
        let (train, _, _) = generate(&spec).unwrap();
        let BatchInputs::Tokens { ids, seq_len, .. } = &train.inputs else { panic!() };
        for i in 0..train.len() {
            let ones = ids[i * seq_len..(i + 1) * seq_len].iter().filter(|&&t| t == 1).count();
            assert_ne!(2 * ones, *seq_len, "ties are resampled");
            assert_eq!(train.labels[i], usize::from(2 * ones > *seq_len));
        }
    }

    #[test]
    fn splits_are_disjoint_for_token_tasks() {
        let spec = TaskSpec {
            generator: GeneratorId::SeqParity,
            n_train: 500,
            n_val: 200,
            n_test: 200,
            noise: 0.0,
            seed: 5,
            seq_len: 12,
        };
        let (train, val, test) = generate(&spec).unwrap();
        let keys = |ds: &Dataset| -> HashSet<u64> {
            let BatchInputs::Tokens { ids, seq_len, .. } = &ds.inputs else { panic!() };
            (0..ds.len()).map(|i| token_key(&ids[i * seq_len..(i + 1) * seq_len])).collect()
        };
        let (a, b, c) = (keys(&train), keys(&val), keys(&test));
        assert_eq!(a.len(), 500);
        assert!(a.is_disjoint(&b));
        assert!(a.is_disjoint(&c));
        assert!(b.is_disjoint(&c));
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, _, _) = generate(&moons_spec(50, 0.1, 7)).unwrap();
        let (b, _, _) = generate(&moons_spec(50, 0.1, 7)).unwrap();
        let BatchInputs::Features(ta) = &a.inputs else { panic!() };
        let BatchInputs::Features(tb) = &b.inputs else { panic!() };
        assert_eq!(ta.data(), tb.data());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn class_balance_is_exact() {
        let (train, _, _) = generate(&moons_spec(201, 0.2, 2)).unwrap();
        let ones = train.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 100); // 201 -> 101 class 0, 100 class 1
        let spec = TaskSpec {
            generator: GeneratorId::SeqMajority,
            n_train: 200,
            n_val: 50,
            n_test: 50,
            noise: 0.0,
            seed: 1,
            seq_len: 16,
        };
        let (tr, _, _) = generate(&spec).unwrap();
        assert_eq!(tr.labels.iter().filter(|&&l| l == 1).count(), 100);
    }

    #[test]
    fn batch_sizes_keep_last_partial() {
        let (train, _, _) = generate(&moons_spec(10, 0.0, 1)).unwrap();
        let bs = batches(&train, 4, 99, 0).unwrap();
        let sizes: Vec<usize> = bs.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seeds_give_identical_batch_sequences() {
        let (train, _, _) = generate(&moons_spec(32, 0.1, 4)).unwrap();
        let a = batches(&train, 8, 7, 3).unwrap();
        let b = batches(&train, 8, 7, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labels, y.labels);
        }
        // Different epochs permute differently.
        let c = batches(&train, 8, 7, 4).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.labels != y.labels));
    }

    #[test]
    fn epoch_batches_cover_every_index_once() {
        let (train, _, _) = generate(&moons_spec(33, 0.1, 4)).unwrap();
        let bs = batches(&train, 5, 1, 0).unwrap();
        let total: usize = bs.iter().map(|b| b.len()).sum();
        assert_eq!(total, 33);
        // Labels multiset must match the dataset's.
        let mut got: Vec<usize> = bs.iter().flat_map(|b| b.labels.clone()).collect();
        let mut want = train.labels.clone();
        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn unknown_generator_is_an_error() {
        assert!(matches!(GeneratorId::parse("spirals"), Err(DataError::UnknownGenerator(_))));
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let (train, _, _) = generate(&moons_spec(5, 0.0, 1)).unwrap();
        let csv = train.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "x0,x1,label");
    }
}
