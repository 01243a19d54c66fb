//! Structured pruning of a student transformer: stochastic hard-concrete
//! gates on attention heads and feed-forward hidden units, trained with a
//! logit-distillation objective from a frozen teacher and a Lagrangian
//! sparsity constraint, then hardened to a binary structure.

use thiserror::Error;

use crate::data::Dataset;
use crate::model::{
    build_forward, Batch, Checkpoint, GatePlan, LossKind, ModelSpec, ParamEntry, ParamKind,
    ParamStore,
};
use crate::opt::{adam_step, AdamParams, AdamState, OptError};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Result as TensorResult, Tape, Tensor, VarId};
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum StructuredError {
    #[error("hard-concrete constants invalid: need gamma < 0 < zeta and beta > 0")]
    BadConstants,
    #[error("uniform draw {0} outside (0, 1)")]
    BadDraw(f64),
    #[error("student must be a transformer")]
    NotTransformer,
    #[error("teacher and student disagree on task interface")]
    InterfaceMismatch,
    #[error("structured config invalid: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

pub type Result<T> = std::result::Result<T, StructuredError>;

/// Stretched-sigmoid relaxation constants.
#[derive(Debug, Clone, Copy)]
pub struct HardConcrete {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        HardConcrete { beta: 2.0 / 3.0, gamma: -0.1, zeta: 1.1 }
    }
}

impl HardConcrete {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 && self.zeta > 0.0 && self.beta > 0.0 {
            Ok(())
        } else {
            Err(StructuredError::BadConstants)
        }
    }
}

/// One stochastic gate draw: stretch a concrete sample and clamp to [0, 1].
pub fn sample_gate(log_alpha: f64, hc: &HardConcrete, u: f64) -> Result<f64> {
    hc.validate()?;
    if !(0.0 < u && u < 1.0) {
        return Err(StructuredError::BadDraw(u));
    }
    let s = crate::tensor::sigmoid((u.ln() - (1.0 - u).ln() + log_alpha) / hc.beta);
    let stretched = s * (hc.zeta - hc.gamma) + hc.gamma;
    Ok(stretched.clamp(0.0, 1.0))
}

/// Probability that a gate is open (> 0) under the hard-concrete law.
pub fn expected_open_prob(log_alpha: f64, hc: &HardConcrete) -> f64 {
    crate::tensor::sigmoid(log_alpha - hc.beta * (-hc.gamma / hc.zeta).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Head,
    FfUnit,
}

#[derive(Debug, Clone)]
pub struct GateGroup {
    pub kind: GroupKind,
    pub layer: usize,
    pub index: usize,
    /// Parameters removed when this group is pruned.
    pub param_count: usize,
}

/// Gate parameters over every attention head and feed-forward unit of a
/// student transformer, in (layer, heads..., units...) order.
#[derive(Debug, Clone)]
pub struct GateSet {
    pub log_alpha: Vec<f64>,
    pub groups: Vec<GateGroup>,
    pub hc: HardConcrete,
}

impl GateSet {
    pub fn for_student(spec: &ModelSpec, hc: HardConcrete, init_log_alpha: f64) -> Result<Self> {
        hc.validate()?;
        let ModelSpec::Transformer { n_layers, n_heads, d_model, d_ff, .. } = spec else {
            return Err(StructuredError::NotTransformer);
        };
        let dk = d_model / n_heads;
        let head_params = 3 * (d_model * dk + dk) + dk * d_model;
        let unit_params = 2 * d_model + 1;
        let mut groups = Vec::new();
        for layer in 0..*n_layers {
            for index in 0..*n_heads {
                groups.push(GateGroup { kind: GroupKind::Head, layer, index, param_count: head_params });
            }
            for index in 0..*d_ff {
                groups.push(GateGroup { kind: GroupKind::FfUnit, layer, index, param_count: unit_params });
            }
        }
        let log_alpha = vec![init_log_alpha; groups.len()];
        Ok(GateSet { log_alpha, groups, hc })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn total_gated_params(&self) -> usize {
        self.groups.iter().map(|g| g.param_count).sum()
    }

    /// Expected fraction of gated parameters removed under the current gates.
    pub fn expected_sparsity(&self) -> f64 {
        let total = self.total_gated_params() as f64;
        let kept: f64 = self
            .log_alpha
            .iter()
            .zip(&self.groups)
            .map(|(&la, g)| expected_open_prob(la, &self.hc) * g.param_count as f64)
            .sum();
        1.0 - kept / total
    }
}

/// Deterministic gate collapse at open-probability 0.5.
pub fn harden_gates(gates: &GateSet) -> (Vec<bool>, f64) {
    let open: Vec<bool> = gates
        .log_alpha
        .iter()
        .map(|&la| expected_open_prob(la, &gates.hc) >= 0.5)
        .collect();
    let total = gates.total_gated_params() as f64;
    let removed: usize = open
        .iter()
        .zip(&gates.groups)
        .filter(|(&o, _)| !o)
        .map(|(_, g)| g.param_count)
        .sum();
    (open, removed as f64 / total)
}

/// CSV sidecar describing the hardened structure, one row per group.
pub fn structure_sidecar_csv(gates: &GateSet, open: &[bool]) -> String {
    let mut out = String::from("layer,kind,index,open,param_count\n");
    for (g, &o) in gates.groups.iter().zip(open) {
        let kind = match g.kind {
            GroupKind::Head => "head",
            GroupKind::FfUnit => "ff-unit",
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            g.layer,
            kind,
            g.index,
            u8::from(o),
            g.param_count
        ));
    }
    out
}

/// Zero the parameter slices owned by every closed group.
pub fn zero_closed_groups(student: &mut ParamStore, gates: &GateSet, open: &[bool]) -> Result<()> {
    let ModelSpec::Transformer { n_heads, d_model, d_ff, .. } = student.spec().clone() else {
        return Err(StructuredError::NotTransformer);
    };
    let dk = d_model / n_heads;
    for (g, &o) in gates.groups.iter().zip(open) {
        if o {
            continue;
        }
        let pre = format!("enc{}", g.layer);
        match g.kind {
            GroupKind::Head => {
                let lo = g.index * dk;
                let hi = lo + dk;
                for mat in ["wq", "wk", "wv"] {
                    let wi = student.position(&format!("{pre}.attn.{mat}.weight")).unwrap();
                    let w = student.tensor_mut(wi).data_mut();
                    for r in 0..d_model {
                        for c in lo..hi {
                            w[r * d_model + c] = 0.0;
                        }
                    }
                    let bi = student.position(&format!("{pre}.attn.{mat}.bias")).unwrap();
                    let b = student.tensor_mut(bi).data_mut();
                    for c in lo..hi {
                        b[c] = 0.0;
                    }
                }
                let oi = student.position(&format!("{pre}.attn.wo.weight")).unwrap();
                let w = student.tensor_mut(oi).data_mut();
                for r in lo..hi {
                    for c in 0..d_model {
                        w[r * d_model + c] = 0.0;
                    }
                }
            }
            GroupKind::FfUnit => {
                let j = g.index;
                let w1i = student.position(&format!("{pre}.ff.w1.weight")).unwrap();
                let w1 = student.tensor_mut(w1i).data_mut();
                for r in 0..d_model {
                    w1[r * d_ff + j] = 0.0;
                }
                let b1i = student.position(&format!("{pre}.ff.w1.bias")).unwrap();
                student.tensor_mut(b1i).data_mut()[j] = 0.0;
                let w2i = student.position(&format!("{pre}.ff.w2.weight")).unwrap();
                let w2 = student.tensor_mut(w2i).data_mut();
                for c in 0..d_model {
                    w2[j * d_model + c] = 0.0;
                }
            }
        }
    }
    Ok(())
}

/// Frozen teacher and gated student sharing one task interface.
#[derive(Debug, Clone)]
pub struct DistillPair {
    pub teacher: ParamStore,
    pub student: ParamStore,
}

impl DistillPair {
    pub fn validate(&self) -> Result<()> {
        if self.teacher.spec().n_classes() != self.student.spec().n_classes() {
            return Err(StructuredError::InterfaceMismatch);
        }
        let seq = |s: &ModelSpec| matches!(s, ModelSpec::Transformer { .. });
        if seq(self.teacher.spec()) != seq(self.student.spec()) {
            return Err(StructuredError::InterfaceMismatch);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StructuredPruneConfig {
    /// Fraction of gated parameters to remove.
    pub target_sparsity: f64,
    /// Ascent rate of the Lagrangian multiplier.
    pub lambda_lr: f64,
    pub distill_weight: f64,
    pub temperature: f64,
    pub hc: HardConcrete,
    pub prune_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gate_lr: f64,
    pub init_log_alpha: f64,
    pub seed: u64,
}

impl Default for StructuredPruneConfig {
    fn default() -> Self {
        StructuredPruneConfig {
            target_sparsity: 0.95,
            lambda_lr: 0.2,
            distill_weight: 1.0,
            temperature: 2.0,
            hc: HardConcrete::default(),
            prune_epochs: 20,
            finetune_epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            gate_lr: 0.05,
            init_log_alpha: 2.0,
            seed: 0,
        }
    }
}

impl StructuredPruneConfig {
    pub fn validate(&self) -> Result<()> {
        self.hc.validate()?;
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(StructuredError::BadConfig("target sparsity must be in [0, 1)".into()));
        }
        if self.temperature <= 0.0 {
            return Err(StructuredError::BadConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct StructuredOutcome {
    pub checkpoint: Checkpoint,
    pub sparsity: f64,
    pub val_metric: f64,
    /// Hardened sparsity landed within 0.01 of the target.
    pub within_tolerance: bool,
    pub final_lambda: f64,
    pub gates: GateSet,
    pub open: Vec<bool>,
}

/// Build the gate vector on the tape from the log-alpha leaf: clamped
/// stretched sigmoid of (concrete noise + log_alpha) / beta.
fn gate_vector(
    tape: &mut Tape,
    la: VarId,
    noise: &[f64],
    hc: &HardConcrete,
) -> TensorResult<VarId> {
    let c = tape.constant(Tensor::vector(noise.to_vec()))?;
    let z = tape.add(c, la)?;
    let z = tape.mul_scalar(z, 1.0 / hc.beta)?;
    let s = tape.sigmoid(z)?;
    let s = tape.mul_scalar(s, hc.zeta - hc.gamma)?;
    let s = tape.add_scalar(s, hc.gamma)?;
    tape.clamp(s, 0.0, 1.0)
}

fn split_gate_plan(
    tape: &mut Tape,
    gate_vec: VarId,
    spec: &ModelSpec,
) -> TensorResult<GatePlan> {
    let ModelSpec::Transformer { n_layers, n_heads, d_ff, .. } = spec else { unreachable!() };
    let mut head_gates = Vec::with_capacity(*n_layers);
    let mut ff_gates = Vec::with_capacity(*n_layers);
    let mut off = 0;
    for _ in 0..*n_layers {
        head_gates.push(tape.slice1d(gate_vec, off, *n_heads)?);
        off += n_heads;
        ff_gates.push(tape.slice1d(gate_vec, off, *d_ff)?);
        off += d_ff;
    }
    Ok(GatePlan { head_gates, ff_gates })
}

/// Expected-sparsity value and its gate-leaf gradient contribution are built
/// on-tape: 1 - sum(p_open * weights) / total.
fn expected_sparsity_var(
    tape: &mut Tape,
    la: VarId,
    gates: &GateSet,
) -> TensorResult<VarId> {
    let shift = -gates.hc.beta * (-gates.hc.gamma / gates.hc.zeta).ln();
    let z = tape.add_scalar(la, shift)?;
    let p = tape.sigmoid(z)?;
    let weights: Vec<f64> = gates.groups.iter().map(|g| g.param_count as f64).collect();
    let w = tape.constant(Tensor::vector(weights))?;
    let kept = tape.mul(p, w)?;
    let kept = tape.sum_all(kept)?;
    let frac = tape.mul_scalar(kept, -1.0 / gates.total_gated_params() as f64)?;
    tape.add_scalar(frac, 1.0)
}

fn teacher_soft_targets(
    teacher: &ParamStore,
    batch: &Batch,
    temperature: f64,
) -> TensorResult<Tensor> {
    let (pass, _) = crate::model::model_forward(teacher, batch, LossKind::CrossEntropy)?;
    let logits = pass.tape.value(pass.logits);
    let classes = *logits.shape().last().unwrap();
    let mut probs = logits.data().iter().map(|v| v / temperature).collect::<Vec<f64>>();
    for row in probs.chunks_mut(classes) {
        crate::tensor::softmax_row(row);
    }
    Tensor::new(logits.shape().to_vec(), probs)
}

fn gate_store(gates: &GateSet, spec: &ModelSpec) -> ParamStore {
    ParamStore::from_entries(
        spec.clone(),
        vec![ParamEntry {
            name: "gates.log_alpha".into(),
            tensor: Tensor::vector(gates.log_alpha.clone()),
            prunable: false,
            kind: ParamKind::Bias,
        }],
    )
}

/// One gated distillation step; returns (total loss, expected sparsity).
#[allow(clippy::too_many_arguments)]
fn gated_step(
    student: &mut ParamStore,
    gate_params: &mut ParamStore,
    gates: &GateSet,
    batch: &Batch,
    teacher_probs: &Tensor,
    cfg: &StructuredPruneConfig,
    lambda: f64,
    noise: &[f64],
    student_opt: &mut AdamState,
    gate_opt: &mut AdamState,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let mut la_tensor = gate_params.tensor(0).clone();
    la_tensor.set_requires_grad(true);
    let la = tape.leaf(&la_tensor)?;
    let gate_vec = gate_vector(&mut tape, la, noise, &gates.hc)?;
    let plan = split_gate_plan(&mut tape, gate_vec, student.spec())?;

    let (ce, logits, leaves) =
        build_forward(student, batch, LossKind::CrossEntropy, &mut tape, Some(&plan))?;

    let t = cfg.temperature;
    let scaled = tape.mul_scalar(logits, 1.0 / t)?;
    let kl = tape.kl_soft_targets(scaled, teacher_probs)?;
    let kl = tape.mul_scalar(kl, cfg.distill_weight * t * t)?;

    let shat = expected_sparsity_var(&mut tape, la, gates)?;
    let constraint = tape.add_scalar(shat, -cfg.target_sparsity)?;
    let constraint = tape.mul_scalar(constraint, lambda)?;

    let loss = tape.add(ce, kl)?;
    let loss = tape.add(loss, constraint)?;

    let sparsity_value = tape.value(shat).item();
    let loss_value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;

    let student_grads: Vec<Tensor> = leaves
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            grads.take(id).unwrap_or_else(|| Tensor::zeros(student.tensor(i).shape().to_vec()))
        })
        .collect();
    adam_step(student, &student_grads, student_opt, None)?;

    let gate_grad = vec![grads
        .take(la)
        .unwrap_or_else(|| Tensor::zeros(vec![gates.len()]))];
    adam_step(gate_params, &gate_grad, gate_opt, None)?;

    Ok((loss_value, sparsity_value))
}

/// Run gated distillation training, harden the gates, zero the closed
/// structures and fine-tune the survivor with the structure fixed.
pub fn structured_prune_train(
    pair: &DistillPair,
    cfg: &StructuredPruneConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
) -> Result<StructuredOutcome> {
    cfg.validate()?;
    pair.validate()?;
    let mut gates = GateSet::for_student(pair.student.spec(), cfg.hc, cfg.init_log_alpha)?;
    let mut student = pair.student.clone();
    let mut gate_params = gate_store(&gates, student.spec());
    let mut student_opt =
        AdamState::new(&student, AdamParams { lr: cfg.lr, ..Default::default() });
    let mut gate_opt =
        AdamState::new(&gate_params, AdamParams { lr: cfg.gate_lr, ..Default::default() });
    let mut lambda = 0.0f64;
    let mut rng = Rng::new(derive_seed(cfg.seed, "structured/noise"));
    let shuffle_seed = derive_seed(cfg.seed, "structured/shuffle");

    for epoch in 0..cfg.prune_epochs as u64 {
        for batch in crate::data::batches(train_ds, cfg.batch_size, shuffle_seed, epoch)? {
            let teacher_probs = teacher_soft_targets(&pair.teacher, &batch, cfg.temperature)?;
            let noise: Vec<f64> = (0..gates.len())
                .map(|_| {
                    let u = rng.uniform_open();
                    u.ln() - (1.0 - u).ln()
                })
                .collect();
            let (_, shat) = gated_step(
                &mut student,
                &mut gate_params,
                &gates,
                &batch,
                &teacher_probs,
                cfg,
                lambda,
                &noise,
                &mut student_opt,
                &mut gate_opt,
            )?;
            lambda += cfg.lambda_lr * (shat - cfg.target_sparsity);
            if !lambda.is_finite() {
                return Err(StructuredError::BadConfig(
                    "lagrangian multiplier diverged".into(),
                ));
            }
        }
        gates.log_alpha = gate_params.tensor(0).data().to_vec();
    }
    gates.log_alpha = gate_params.tensor(0).data().to_vec();

    let (open, sparsity) = harden_gates(&gates);
    zero_closed_groups(&mut student, &gates, &open)?;

    // Final fine-tuning with the structure fixed: gates become 0/1 constants.
    let hard_values: Vec<f64> = open.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
    let mut ft_opt = AdamState::new(
        &student,
        AdamParams { lr: cfg.lr, ..Default::default() },
    );
    let ft_shuffle = derive_seed(cfg.seed, "structured/finetune-shuffle");
    let total_steps =
        (cfg.finetune_epochs * train_ds.len().div_ceil(cfg.batch_size)).max(1) as f64;
    let mut step = 0f64;
    for epoch in 0..cfg.finetune_epochs as u64 {
        for batch in crate::data::batches(train_ds, cfg.batch_size, ft_shuffle, epoch)? {
            let mut tape = Tape::new();
            let gate_vec = tape.constant(Tensor::vector(hard_values.clone()))?;
            let plan = split_gate_plan(&mut tape, gate_vec, student.spec())?;
            let (loss, _, leaves) =
                build_forward(&student, &batch, LossKind::CrossEntropy, &mut tape, Some(&plan))?;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor> = leaves
                .iter()
                .enumerate()
                .map(|(i, &id)| {
                    grads
                        .take(id)
                        .unwrap_or_else(|| Tensor::zeros(student.tensor(i).shape().to_vec()))
                })
                .collect();
            ft_opt.set_lr(cfg.lr * (1.0 - step / total_steps));
            adam_step(&mut student, &g, &mut ft_opt, None)?;
            step += 1.0;
        }
    }

    let (_, val_metric) = eval_hardened(&student, &hard_values, val_ds)?;
    let mut ckpt = Checkpoint::new(student);
    ckpt.set_meta("structured_sparsity", format!("{sparsity}"));
    ckpt.set_meta("seed", cfg.seed);
    let within_tolerance = (sparsity - cfg.target_sparsity).abs() <= 0.01;
    Ok(StructuredOutcome {
        checkpoint: ckpt,
        sparsity,
        val_metric,
        within_tolerance,
        final_lambda: lambda,
        gates,
        open,
    })
}

/// Evaluate a student under fixed binary gates.
pub fn eval_hardened(
    student: &ParamStore,
    hard_values: &[f64],
    ds: &Dataset,
) -> Result<(f64, f64)> {
    let mut total_loss = 0.0;
    let mut total_correct = 0.0;
    let mut n = 0usize;
    for batch in crate::data::ordered_batches(ds, 256)? {
        let mut tape = Tape::new();
        let gate_vec = tape.constant(Tensor::vector(hard_values.to_vec()))?;
        let plan = split_gate_plan(&mut tape, gate_vec, student.spec())?;
        let (loss, logits, _) =
            build_forward(student, &batch, LossKind::CrossEntropy, &mut tape, Some(&plan))?;
        let metric = crate::model::accuracy(tape.value(logits), &batch.labels);
        let b = batch.len();
        total_loss += tape.value(loss).item() * b as f64;
        total_correct += metric * b as f64;
        n += b;
    }
    Ok((total_loss / n as f64, total_correct / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Activation};

    fn student_spec() -> ModelSpec {
        ModelSpec::Transformer {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 24,
            vocab: 3,
            max_len: 8,
            n_classes: 2,
            activation: Activation::Gelu,
            init_seed: 3,
        }
    }

    #[test]
    fn sample_gate_midpoint_arithmetic() {
        let hc = HardConcrete { beta: 1.0, gamma: -0.1, zeta: 1.1 };
        // u = 0.5 contributes no noise; log_alpha = 0 puts s at 0.5.
        let g = sample_gate(0.0, &hc, 0.5).unwrap();
        assert!((g - 0.5).abs() < 1e-15, "{g}");
    }

    #[test]
    fn gate_limits() {
        let hc = HardConcrete::default();
        assert_eq!(sample_gate(40.0, &hc, 0.5).unwrap(), 1.0);
        assert_eq!(sample_gate(-40.0, &hc, 0.5).unwrap(), 0.0);
        assert!(sample_gate(0.0, &hc, 0.0).is_err());
        assert!(sample_gate(0.0, &hc, 1.0).is_err());
    }

    #[test]
    fn gate_gradient_matches_finite_difference() {
        let hc = HardConcrete::default();
        let u = 0.37;
        let la = 0.2;
        // Analytic gradient via the tape.
        let mut tape = Tape::new();
        let mut t = Tensor::vector(vec![la]);
        t.set_requires_grad(true);
        let leaf = tape.leaf(&t).unwrap();
        let noise = f64::ln(u) - f64::ln(1.0 - u);
        let g = gate_vector(&mut tape, leaf, &[noise], &hc).unwrap();
        let loss = tape.sum_all(g).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(leaf).unwrap().data()[0];

        let fd = crate::fd::finite_diff_vec(
            |x| Ok(sample_gate(x[0], &hc, u).unwrap()),
            &[la],
            1e-6,
        )
        .unwrap()[0];
        assert!((analytic - fd).abs() < 1e-6, "{analytic} vs {fd}");
    }

    #[test]
    fn expected_open_prob_matches_monte_carlo() {
        let hc = HardConcrete::default();
        let la = 0.0;
        let p = expected_open_prob(la, &hc);
        // Pinned analytic value: sigmoid((2/3) ln 11).
        let analytic = 1.0 / (1.0 + (-(2.0 / 3.0) * 11f64.ln()).exp());
        assert!((p - analytic).abs() < 1e-12);
        assert!((p - 0.8318).abs() < 5e-4, "{p}");

        let mut rng = Rng::new(123);
        let n = 1_000_000;
        let mut open = 0usize;
        for _ in 0..n {
            let u = rng.uniform_open();
            if sample_gate(la, &hc, u).unwrap() > 0.0 {
                open += 1;
            }
        }
        let mc = open as f64 / n as f64;
        assert!((p - mc).abs() < 2e-3, "analytic {p} vs mc {mc}");
    }

    #[test]
    fn expected_open_prob_is_monotone() {
        let hc = HardConcrete::default();
        let mut last = 0.0;
        for i in 0..40 {
            let la = -10.0 + i as f64 * 0.5;
            let p = expected_open_prob(la, &hc);
            assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn harden_extremes() {
        let spec = student_spec();
        let all_open = GateSet::for_student(&spec, HardConcrete::default(), 10.0).unwrap();
        let (open, sparsity) = harden_gates(&all_open);
        assert!(open.iter().all(|&o| o));
        assert_eq!(sparsity, 0.0);

        let all_closed = GateSet::for_student(&spec, HardConcrete::default(), -10.0).unwrap();
        let (open, sparsity) = harden_gates(&all_closed);
        assert!(open.iter().all(|&o| !o));
        assert_eq!(sparsity, 1.0);
    }

    #[test]
    fn harden_mixed_matches_per_group_enumeration() {
        let spec = student_spec();
        let mut gates = GateSet::for_student(&spec, HardConcrete::default(), 0.0).unwrap();
        let mut rng = Rng::new(7);
        for la in gates.log_alpha.iter_mut() {
            *la = rng.normal() * 3.0;
        }
        let (open, sparsity) = harden_gates(&gates);
        let mut removed = 0usize;
        let mut total = 0usize;
        for (i, g) in gates.groups.iter().enumerate() {
            total += g.param_count;
            let p = expected_open_prob(gates.log_alpha[i], &gates.hc);
            assert_eq!(open[i], p >= 0.5);
            if p < 0.5 {
                removed += g.param_count;
            }
        }
        assert_eq!(sparsity, removed as f64 / total as f64);
    }

    #[test]
    fn group_cover_is_exact() {
        let spec = student_spec();
        let gates = GateSet::for_student(&spec, HardConcrete::default(), 0.0).unwrap();
        // 2 layers x (2 heads + 24 units)
        assert_eq!(gates.len(), 2 * (2 + 24));
        let head_params = 3 * (16 * 8 + 8) + 8 * 16;
        let unit_params = 2 * 16 + 1;
        assert_eq!(gates.total_gated_params(), 2 * (2 * head_params + 24 * unit_params));
    }

    #[test]
    fn zeroing_closed_head_matches_gated_forward() {
        // A head whose gate is exactly 0 contributes nothing; zeroing its
        // slices must leave the gated forward output unchanged.
        let spec = student_spec();
        let ps = build_model(&spec).unwrap();
        let gates = GateSet::for_student(&spec, HardConcrete::default(), 0.0).unwrap();
        let mut open = vec![true; gates.len()];
        open[0] = false; // close layer-0 head-0
        let hard: Vec<f64> = open.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        let batch = Batch {
            inputs: crate::model::BatchInputs::Tokens {
                ids: vec![0, 1, 1, 0, 1, 0, 0, 1],
                batch: 1,
                seq_len: 8,
            },
            labels: vec![1],
        };
        let logits_for = |params: &ParamStore| {
            let mut tape = Tape::new();
            let gv = tape.constant(Tensor::vector(hard.clone())).unwrap();
            let plan = split_gate_plan(&mut tape, gv, params.spec()).unwrap();
            let (_, logits, _) =
                build_forward(params, &batch, LossKind::CrossEntropy, &mut tape, Some(&plan))
                    .unwrap();
            tape.value(logits).clone()
        };
        let before = logits_for(&ps);
        let mut zeroed = ps.clone();
        zero_closed_groups(&mut zeroed, &gates, &open).unwrap();
        let after = logits_for(&zeroed);
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
