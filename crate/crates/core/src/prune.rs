//! Unstructured magnitude pruning: mask construction and application,
//! iterative pruning with and without rewinding, one-shot pruning, random
//! baselines and ticket transfer.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::data::Dataset;
use crate::model::checkpoint::{split_checked_payload, ByteReader, ByteWriter};
use crate::model::{Checkpoint, CheckpointError, ParamStore};
use crate::opt::MaskView;
use crate::rng::{derive_seed, Rng};
use crate::train::{train, TrainConfig, TrainError, TrainOutcome};
use crate::util::write_atomic;

pub const FMSK_MAGIC: &[u8; 5] = b"FMSK1";
pub const FMSK_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("target sparsity {target} outside [{lo}, 1]")]
    BadTarget { target: f64, lo: f64 },
    #[error("mask does not align with parameter store: {0}")]
    Misaligned(String),
    #[error("prune schedule invalid: {0}")]
    BadSchedule(String),
    #[error("training failed in iteration {iteration}: {source}")]
    Training { iteration: usize, source: TrainError },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    File(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, PruneError>;

/// Binary keep/drop bits over the prunable parameters, aligned by name with
/// the registry order. Bit 1 keeps a weight, bit 0 pins it to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    entries: Vec<MaskEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskEntry {
    pub name: String,
    pub bits: Vec<u8>,
}

impl Mask {
    /// Fully dense mask over the prunable set of a store.
    pub fn all_ones(ps: &ParamStore) -> Self {
        let entries = ps
            .entries()
            .iter()
            .filter(|e| e.prunable)
            .map(|e| MaskEntry { name: e.name.clone(), bits: vec![1u8; e.tensor.numel()] })
            .collect();
        Mask { entries }
    }

    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.bits.len()).sum()
    }

    pub fn zero_count(&self) -> usize {
        self.entries.iter().map(|e| e.bits.iter().filter(|&&b| b == 0).count()).sum()
    }

    /// Exactly zero-count / prunable-count.
    pub fn sparsity(&self) -> f64 {
        self.zero_count() as f64 / self.total() as f64
    }

    /// Every zero of `self` is also zero in `other`.
    pub fn zeros_subset_of(&self, other: &Mask) -> bool {
        self.entries.iter().zip(&other.entries).all(|(a, b)| {
            a.bits.iter().zip(&b.bits).all(|(&x, &y)| x == 1 || y == 0)
        })
    }

    fn check_alignment(&self, ps: &ParamStore) -> Result<Vec<usize>> {
        let prunable = ps.prunable_indices();
        if prunable.len() != self.entries.len() {
            return Err(PruneError::Misaligned(format!(
                "mask has {} entries, store has {} prunable tensors",
                self.entries.len(),
                prunable.len()
            )));
        }
        for (me, &pi) in self.entries.iter().zip(&prunable) {
            let e = ps.entry(pi);
            if me.name != e.name {
                return Err(PruneError::Misaligned(format!(
                    "mask entry {} vs store entry {}",
                    me.name, e.name
                )));
            }
            if me.bits.len() != e.tensor.numel() {
                return Err(PruneError::Misaligned(format!(
                    "{}: mask has {} bits, tensor has {} elements",
                    me.name,
                    me.bits.len(),
                    e.tensor.numel()
                )));
            }
        }
        Ok(prunable)
    }

    /// Per-registry-entry view consumed by the optimizers.
    pub fn view(&self, ps: &ParamStore) -> Result<MaskView<'_>> {
        let prunable = self.check_alignment(ps)?;
        let mut out: MaskView = vec![None; ps.len()];
        for (me, &pi) in self.entries.iter().zip(&prunable) {
            out[pi] = Some(me.bits.as_slice());
        }
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.buf.extend_from_slice(FMSK_MAGIC);
        w.u32(FMSK_VERSION);
        w.u64(self.total() as u64);
        w.u32(self.entries.len() as u32);
        for e in &self.entries {
            w.str(&e.name);
            w.u64(e.bits.len() as u64);
            let mut packed = vec![0u8; e.bits.len().div_ceil(8)];
            for (i, &b) in e.bits.iter().enumerate() {
                if b != 0 {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            w.buf.extend_from_slice(&packed);
        }
        w.finish_with_crc()
    }

    pub fn decode(raw: &[u8]) -> Result<Self> {
        if raw.len() < FMSK_MAGIC.len() || &raw[..FMSK_MAGIC.len()] != FMSK_MAGIC {
            return Err(PruneError::File(CheckpointError::BadMagic));
        }
        let payload = split_checked_payload(raw)?;
        let mut r = ByteReader::new(&payload[FMSK_MAGIC.len()..]);
        let version = r.u32()?;
        if version != FMSK_VERSION {
            return Err(PruneError::File(CheckpointError::Version(version)));
        }
        let declared_total = r.u64()? as usize;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n);
        let mut total = 0usize;
        for _ in 0..n {
            let name = r.str()?;
            let len = r.u64()? as usize;
            let packed = r.bytes(len.div_ceil(8))?;
            let bits: Vec<u8> =
                (0..len).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect();
            total += len;
            entries.push(MaskEntry { name, bits });
        }
        if total != declared_total {
            return Err(PruneError::File(CheckpointError::Malformed(format!(
                "prunable count {declared_total} does not match bit total {total}"
            ))));
        }
        Ok(Mask { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        write_atomic(path, |f| f.write_all(&bytes)).map_err(CheckpointError::Io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(CheckpointError::Io)?;
        Mask::decode(&raw)
    }
}

/// Rounding rule for target counts: half away from zero.
fn target_zero_count(target: f64, total: usize) -> usize {
    (target * total as f64).round() as usize
}

/// Grow a mask to `target_sparsity` by pruning the unpruned prunable weights
/// with the smallest absolute magnitude, ranked globally across tensors.
/// Ties break by (registry order, flat index) ascending.
pub fn magnitude_mask(ps: &ParamStore, current: &Mask, target_sparsity: f64) -> Result<Mask> {
    let prunable = current.check_alignment(ps)?;
    let cur_sparsity = current.sparsity();
    if !(0.0..=1.0).contains(&target_sparsity) || target_sparsity.is_nan() {
        return Err(PruneError::BadTarget { target: target_sparsity, lo: cur_sparsity });
    }
    let total = current.total();
    let needed = target_zero_count(target_sparsity, total);
    let have = current.zero_count();
    if needed < have {
        return Err(PruneError::BadTarget { target: target_sparsity, lo: cur_sparsity });
    }

    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(total - have);
    for (ei, (me, &pi)) in current.entries.iter().zip(&prunable).enumerate() {
        let data = ps.tensor(pi).data();
        for (j, &b) in me.bits.iter().enumerate() {
            if b == 1 {
                candidates.push((data[j].abs(), ei, j));
            }
        }
    }
    candidates.sort_unstable_by(|a, b| {
        a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });

    let mut mask = current.clone();
    for &(_, ei, j) in candidates.iter().take(needed - have) {
        mask.entries[ei].bits[j] = 0;
    }
    Ok(mask)
}

/// Uniformly sample exactly round(target * prunable-count) positions to drop.
pub fn random_mask(ps: &ParamStore, target_sparsity: f64, seed: u64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&target_sparsity) || target_sparsity.is_nan() {
        return Err(PruneError::BadTarget { target: target_sparsity, lo: 0.0 });
    }
    let mut mask = Mask::all_ones(ps);
    let total = mask.total();
    let k = target_zero_count(target_sparsity, total);
    let mut rng = Rng::new(derive_seed(seed, "random-mask"));
    let picked = rng.sample_indices(total, k);
    let mut offsets = Vec::with_capacity(mask.entries.len() + 1);
    let mut acc = 0;
    for e in &mask.entries {
        offsets.push(acc);
        acc += e.bits.len();
    }
    offsets.push(acc);
    for flat in picked {
        let ei = offsets.partition_point(|&o| o <= flat) - 1;
        mask.entries[ei].bits[flat - offsets[ei]] = 0;
    }
    Ok(mask)
}

/// Zero out masked weights in place.
pub fn apply_mask(ps: &mut ParamStore, mask: &Mask) -> Result<()> {
    let prunable = mask.check_alignment(ps)?;
    for (me, &pi) in mask.entries.iter().zip(&prunable) {
        let data = ps.tensor_mut(pi).data_mut();
        for (j, &b) in me.bits.iter().enumerate() {
            if b == 0 {
                data[j] = 0.0;
            }
        }
    }
    Ok(())
}

/// Assert that every masked coordinate is exactly zero.
pub fn masked_coords_are_zero(ps: &ParamStore, mask: &Mask) -> bool {
    let Ok(prunable) = mask.check_alignment(ps) else { return false };
    mask.entries.iter().zip(&prunable).all(|(me, &pi)| {
        let data = ps.tensor(pi).data();
        me.bits.iter().enumerate().all(|(j, &b)| b == 1 || data[j] == 0.0)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMode {
    ImpRewind,
    Standard,
    OneShot,
}

#[derive(Debug, Clone)]
pub struct PruneSchedule {
    pub mode: PruneMode,
    /// Absolute sparsity added per iteration.
    pub increment: f64,
    pub iterations: usize,
    /// Training epochs per iteration. Zero degenerates to iterated pruning
    /// of the initial weights.
    pub epochs: usize,
    pub eval_every: f64,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            mode: PruneMode::ImpRewind,
            increment: 0.10,
            iterations: 9,
            epochs: 10,
            eval_every: 1.0,
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.increment <= 0.0 || !self.increment.is_finite() {
            return Err(PruneError::BadSchedule("increment must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(PruneError::BadSchedule("iterations must be >= 1".into()));
        }
        if self.increment * self.iterations as f64 > 1.0 + 1e-12 {
            return Err(PruneError::BadSchedule(
                "increment * iterations must not exceed 1".into(),
            ));
        }
        Ok(())
    }
}

/// Sparse mask plus the init checkpoint it rewinds to.
#[derive(Debug, Clone)]
pub struct Ticket {
    pub mask: Mask,
    pub init: Checkpoint,
    pub task_id: String,
    pub optimizer: String,
    pub seed: u64,
    pub sparsity: f64,
}

/// One recorded iteration of an iterative pruning run.
#[derive(Debug)]
pub struct ImpRow {
    /// Mask sparsity after this iteration's pruning step.
    pub sparsity: f64,
    /// Best validation metric reached while training under the pre-pruning mask.
    pub best_val_metric: f64,
    pub ticket: Ticket,
    /// Best-validation checkpoint of the training phase.
    pub checkpoint: Checkpoint,
}

pub struct PruneRunContext<'a> {
    pub train_ds: &'a Dataset,
    pub val_ds: &'a Dataset,
    /// Rewind target: the initial (or pre-trained) weights.
    pub init: &'a ParamStore,
    pub base_cfg: TrainConfig,
    pub task_id: String,
}

fn train_masked(
    ctx: &PruneRunContext,
    start: &ParamStore,
    mask: &Mask,
    iteration: usize,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        seed: derive_seed(ctx.base_cfg.seed, &format!("prune/iter{iteration}")),
        ..ctx.base_cfg.clone()
    };
    if cfg.epochs == 0 {
        // Degenerate schedule: no training, evaluate the start point as-is.
        let (val_loss, val_metric) =
            crate::train::evaluate(start, ctx.val_ds, cfg.loss_kind)
                .map_err(|source| PruneError::Training { iteration, source })?;
        return Ok(TrainOutcome {
            best_params: start.clone(),
            best_val_metric: val_metric,
            best_val_loss: val_loss,
            best_epoch: 0.0,
            final_params: start.clone(),
            history: Vec::new(),
            steps: 0,
        });
    }
    let view = mask.view(start)?;
    train(start, ctx.train_ds, ctx.val_ds, &cfg, Some(&view))
        .map_err(|source| PruneError::Training { iteration, source })
}

fn make_ticket(ctx: &PruneRunContext, mask: &Mask) -> Ticket {
    let mut init_ckpt = Checkpoint::new(ctx.init.clone());
    init_ckpt.set_meta("task", &ctx.task_id);
    init_ckpt.set_meta("optimizer", ctx.base_cfg.optimizer.name());
    init_ckpt.set_meta("seed", ctx.base_cfg.seed);
    Ticket {
        mask: mask.clone(),
        init: init_ckpt,
        task_id: ctx.task_id.clone(),
        optimizer: ctx.base_cfg.optimizer.name().to_string(),
        seed: ctx.base_cfg.seed,
        sparsity: mask.sparsity(),
    }
}

/// Iterative magnitude pruning. Each iteration trains under the current
/// mask, retains the best-validation checkpoint, prunes it to the next
/// sparsity level, and (in rewind mode) resets surviving weights to the init
/// checkpoint. With `epochs = 0` under `Standard` mode this degenerates to
/// iterated one-shot pruning of the initial model.
pub fn prune_run(ctx: &PruneRunContext, schedule: &PruneSchedule) -> Result<Vec<ImpRow>> {
    schedule.validate()?;
    if schedule.mode == PruneMode::OneShot {
        return Err(PruneError::BadSchedule("one-shot runs use oneshot_prune_eval".into()));
    }
    let rewind = schedule.mode == PruneMode::ImpRewind;
    let mut mask = Mask::all_ones(ctx.init);
    let mut params = ctx.init.clone();
    let mut rows = Vec::with_capacity(schedule.iterations);

    for k in 1..=schedule.iterations {
        let out = train_masked(ctx, &params, &mask, k)?;
        let target = schedule.increment * k as f64;
        mask = magnitude_mask(&out.best_params, &mask, target)?;
        params = if rewind { ctx.init.clone() } else { out.best_params.clone() };
        apply_mask(&mut params, &mask)?;
        let mut ckpt = Checkpoint::new(out.best_params);
        ckpt.set_meta("task", &ctx.task_id);
        ckpt.set_meta("optimizer", ctx.base_cfg.optimizer.name());
        ckpt.set_meta("seed", ctx.base_cfg.seed);
        ckpt.set_meta("iteration", k);
        rows.push(ImpRow {
            sparsity: mask.sparsity(),
            best_val_metric: out.best_val_metric,
            ticket: make_ticket(ctx, &mask),
            checkpoint: ckpt,
        });
    }
    Ok(rows)
}

/// Mask a trained model at each grid sparsity and evaluate without training.
pub fn oneshot_prune_eval(
    trained: &ParamStore,
    val_ds: &Dataset,
    loss_kind: crate::model::LossKind,
    sparsity_grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let mut last = -1.0;
    for &s in sparsity_grid {
        if !(0.0..=1.0).contains(&s) || s < last {
            return Err(PruneError::BadSchedule(
                "sparsity grid must ascend within [0, 1]".into(),
            ));
        }
        last = s;
    }
    let ones = Mask::all_ones(trained);
    let mut out = Vec::with_capacity(sparsity_grid.len());
    for &s in sparsity_grid {
        let mask = magnitude_mask(trained, &ones, s)?;
        let mut pruned = trained.clone();
        apply_mask(&mut pruned, &mask)?;
        let (_, metric) = crate::train::evaluate(&pruned, val_ds, loss_kind)?;
        out.push((mask.sparsity(), metric));
    }
    Ok(out)
}

/// Rewind to the ticket's init, apply its mask, and train on the target task.
pub fn transfer_ticket(
    ticket: &Ticket,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(f64, ParamStore)> {
    let mut params = ticket.init.params.clone();
    apply_mask(&mut params, &ticket.mask)?;
    let view = ticket.mask.view(&params)?;
    let out = train(&params, train_ds, val_ds, cfg, Some(&view))?;
    Ok((out.best_val_metric, out.best_params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelSpec, ParamEntry, ParamKind};
    use crate::tensor::Tensor;

    fn store_with_weights(weights: &[f64]) -> ParamStore {
        let spec = ModelSpec::Mlp {
            in_dim: 1,
            hidden: vec![1],
            n_classes: 1,
            activation: Activation::Relu,
            init_seed: 0,
        };
        ParamStore::from_entries(
            spec,
            vec![
                ParamEntry {
                    name: "w".into(),
                    tensor: Tensor::vector(weights.to_vec()),
                    prunable: true,
                    kind: ParamKind::LinearWeight,
                },
                ParamEntry {
                    name: "b".into(),
                    tensor: Tensor::vector(vec![9.0]),
                    prunable: false,
                    kind: ParamKind::Bias,
                },
            ],
        )
    }

    #[test]
    fn magnitude_mask_prunes_two_smallest() {
        let ps = store_with_weights(&[0.5, -0.1, 0.3, -0.9]);
        let mask = magnitude_mask(&ps, &Mask::all_ones(&ps), 0.5).unwrap();
        assert_eq!(mask.entries()[0].bits, vec![1, 0, 0, 1]);
        assert_eq!(mask.sparsity(), 0.5);
    }

    #[test]
    fn zero_target_keeps_everything() {
        let ps = store_with_weights(&[0.5, -0.1]);
        let mask = magnitude_mask(&ps, &Mask::all_ones(&ps), 0.0).unwrap();
        assert_eq!(mask.entries()[0].bits, vec![1, 1]);
    }

    #[test]
    fn ties_break_by_flat_index() {
        let ps = store_with_weights(&[0.2; 10]);
        let mask = magnitude_mask(&ps, &Mask::all_ones(&ps), 0.3).unwrap();
        assert_eq!(mask.entries()[0].bits, vec![0, 0, 0, 1, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn shrinking_target_is_rejected() {
        let ps = store_with_weights(&[0.5, -0.1, 0.3, -0.9]);
        let half = magnitude_mask(&ps, &Mask::all_ones(&ps), 0.5).unwrap();
        assert!(matches!(
            magnitude_mask(&ps, &half, 0.25),
            Err(PruneError::BadTarget { .. })
        ));
        assert!(magnitude_mask(&ps, &half, 1.1).is_err());
    }

    #[test]
    fn already_pruned_stays_pruned() {
        // After pruning, survivors change magnitude order; zeros must persist.
        let ps = store_with_weights(&[0.5, -0.1, 0.3, -0.9]);
        let m1 = magnitude_mask(&ps, &Mask::all_ones(&ps), 0.25).unwrap();
        assert_eq!(m1.entries()[0].bits, vec![1, 0, 1, 1]);
        let mut pruned = ps.clone();
        apply_mask(&mut pruned, &m1).unwrap();
        let m2 = magnitude_mask(&pruned, &m1, 0.5).unwrap();
        assert!(m1.zeros_subset_of(&m2));
        assert_eq!(m2.entries()[0].bits, vec![1, 0, 0, 1]);
    }

    #[test]
    fn magnitude_mask_matches_brute_force_oracle() {
        // Oracle: repeatedly pick the minimum |w| among unpruned positions,
        // scanning in declaration order (O(n^2), no sorting).
        let mut rng = crate::rng::Rng::new(33);
        let weights: Vec<f64> = (0..400).map(|_| rng.normal()).collect();
        let ps = store_with_weights(&weights);
        let target = 0.37;
        let got = magnitude_mask(&ps, &Mask::all_ones(&ps), target).unwrap();

        let total = weights.len();
        let k = (target * total as f64).round() as usize;
        let mut keep = vec![1u8; total];
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for j in 0..total {
                if keep[j] == 0 {
                    continue;
                }
                match best {
                    None => best = Some(j),
                    Some(b) => {
                        if weights[j].abs() < weights[b].abs() {
                            best = Some(j);
                        }
                    }
                }
            }
            keep[best.unwrap()] = 0;
        }
        assert_eq!(got.entries()[0].bits, keep);
    }

    #[test]
    fn random_mask_exact_count_and_determinism() {
        let ps = store_with_weights(&[0.1; 10]);
        let a = random_mask(&ps, 0.3, 7).unwrap();
        let b = random_mask(&ps, 0.3, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.zero_count(), 3);
        let full = random_mask(&ps, 1.0, 7).unwrap();
        assert_eq!(full.zero_count(), 10);
        let c = random_mask(&ps, 0.3, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn apply_mask_identities() {
        let ps = store_with_weights(&[0.5, -0.1, 0.3, -0.9]);
        let mut all_kept = ps.clone();
        apply_mask(&mut all_kept, &Mask::all_ones(&ps)).unwrap();
        assert!(all_kept.bit_eq(&ps));

        let mut all_dropped = ps.clone();
        let zeros = magnitude_mask(&ps, &Mask::all_ones(&ps), 1.0).unwrap();
        apply_mask(&mut all_dropped, &zeros).unwrap();
        assert_eq!(all_dropped.tensor(0).data(), &[0.0; 4]);
        // Non-prunable entries untouched.
        assert_eq!(all_dropped.tensor(1).data(), &[9.0]);
    }

    #[test]
    fn misaligned_mask_is_rejected() {
        let ps = store_with_weights(&[0.5, -0.1]);
        let other = store_with_weights(&[0.5, -0.1, 0.3]);
        let mask = Mask::all_ones(&other);
        assert!(matches!(
            apply_mask(&mut ps.clone(), &mask),
            Err(PruneError::Misaligned(_))
        ));
    }

    #[test]
    fn mask_file_round_trip() {
        let ps = store_with_weights(&[0.5, -0.1, 0.3, -0.9, 0.7]);
        let mask = magnitude_mask(&ps, &Mask::all_ones(&ps), 0.4).unwrap();
        let bytes = mask.encode();
        let back = Mask::decode(&bytes).unwrap();
        assert_eq!(back, mask);
        // Corruption is caught by the trailer.
        let mut bad = bytes.clone();
        bad[7] ^= 0x40;
        assert!(Mask::decode(&bad).is_err());
    }

    #[test]
    fn schedule_validation() {
        let mut s = PruneSchedule::default();
        s.validate().unwrap();
        s.increment = 0.2;
        s.iterations = 6; // 1.2 > 1
        assert!(s.validate().is_err());
    }
}
