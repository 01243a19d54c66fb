//! Optimizers: Adam, Adam wrapped in a two-pass sharpness-aware step,
//! incremental checkpoint averaging, and loss regularizers.

use thiserror::Error;

use crate::model::ParamStore;
use crate::tensor::{Result as TensorResult, Tape, Tensor, VarId};

#[derive(Debug, Error)]
pub enum OptError {
    #[error("gradient for {name} is non-finite")]
    NonFiniteGrad { name: String },
    #[error("non-finite loss at perturbed point (grad norm {grad_norm}, rho {rho}): {source}")]
    PerturbedEval { grad_norm: f64, rho: f64, source: crate::tensor::TensorError },
    #[error("gradient list has {got} tensors, parameter store has {want}")]
    GradCount { got: usize, want: usize },
    #[error("{name}: state shape {state:?} does not match parameter shape {param:?}")]
    StateShape { name: String, state: Vec<usize>, param: Vec<usize> },
    #[error("checkpoint averaging needs at least 2 evaluation points, got {0}")]
    TooFewEvalPoints(usize),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, OptError>;

/// Keep/drop bits per parameter, aligned with the registry. `None` means the
/// parameter has no mask (all coordinates live). A 0 bit freezes the
/// coordinate: no gradient, no moment update, no perturbation.
pub type MaskView<'a> = Vec<Option<&'a [u8]>>;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub hp: AdamParams,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(ps: &ParamStore, hp: AdamParams) -> Self {
        let m = ps.entries().iter().map(|e| Tensor::zeros(e.tensor.shape().to_vec())).collect();
        let v = ps.entries().iter().map(|e| Tensor::zeros(e.tensor.shape().to_vec())).collect();
        AdamState { hp, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.hp.lr = lr;
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }
}

fn masked(mask: Option<&MaskView>, param: usize, flat: usize) -> bool {
    match mask {
        Some(view) => match view[param] {
            Some(bits) => bits[flat] == 0,
            None => false,
        },
        None => false,
    }
}

/// One Adam update. Masked coordinates are skipped entirely: their weights,
/// moments and step contribution stay untouched.
pub fn adam_step(
    ps: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    mask: Option<&MaskView>,
) -> Result<()> {
    if grads.len() != ps.len() {
        return Err(OptError::GradCount { got: grads.len(), want: ps.len() });
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != ps.tensor(i).shape() {
            return Err(OptError::StateShape {
                name: ps.entry(i).name.clone(),
                state: g.shape().to_vec(),
                param: ps.tensor(i).shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(OptError::NonFiniteGrad { name: ps.entry(i).name.clone() });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let hp = state.hp;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..ps.len() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = ps.tensor_mut(i).data_mut();
        for j in 0..g.len() {
            if masked(mask, i, j) {
                continue;
            }
            let geff = g[j] + hp.weight_decay * w[j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * geff;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * geff * geff;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            w[j] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct SamConfig {
    /// Perturbation radius of the inner ascent step (L2 ball).
    pub rho: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig { rho: 0.05 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SamStepInfo {
    pub loss: f64,
    pub perturbed_loss: f64,
    pub grad_norm: f64,
    pub eps_norm: f64,
}

/// Zero gradient entries for masked coordinates.
pub fn zero_masked_grads(grads: &mut [Tensor], mask: &MaskView) {
    for (i, g) in grads.iter_mut().enumerate() {
        if let Some(bits) = mask[i] {
            for (v, &b) in g.data_mut().iter_mut().zip(bits) {
                if b == 0 {
                    *v = 0.0;
                }
            }
        }
    }
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Two-pass sharpness-aware step: evaluate the gradient, climb to the worst
/// point of the surrounding L2 ball, take the gradient there on the same
/// batch, restore the weights exactly and feed that gradient to Adam.
///
/// A zero radius or a zero gradient skips the perturbation, making the step
/// bit-identical to a plain Adam step. With a mask, frozen coordinates are
/// excluded from both the perturbation and its norm.
pub fn sam_step(
    ps: &mut ParamStore,
    mut loss_and_grads: impl FnMut(&ParamStore) -> TensorResult<(f64, Vec<Tensor>)>,
    sam: &SamConfig,
    state: &mut AdamState,
    mask: Option<&MaskView>,
) -> Result<SamStepInfo> {
    let (loss, mut g1) = loss_and_grads(ps)?;
    if let Some(view) = mask {
        zero_masked_grads(&mut g1, view);
    }
    let grad_norm = global_norm(&g1);

    let mut info = SamStepInfo { loss, perturbed_loss: loss, grad_norm, eps_norm: 0.0 };
    let g2 = if sam.rho > 0.0 && grad_norm > 0.0 {
        let saved = ps.to_flat();
        let scale = sam.rho / grad_norm;
        let mut eps_sq = 0.0;
        for (i, g) in g1.iter().enumerate() {
            let w = ps.tensor_mut(i).data_mut();
            for (wj, &gj) in w.iter_mut().zip(g.data()) {
                let e = scale * gj;
                eps_sq += e * e;
                *wj += e;
            }
        }
        info.eps_norm = eps_sq.sqrt();
        let evaluated = loss_and_grads(ps);
        ps.load_flat(&saved);
        let (l2, mut g2) = evaluated
            .map_err(|e| OptError::PerturbedEval { grad_norm, rho: sam.rho, source: e })?;
        info.perturbed_loss = l2;
        if let Some(view) = mask {
            zero_masked_grads(&mut g2, view);
        }
        g2
    } else {
        g1
    };
    adam_step(ps, &g2, state, mask)?;
    Ok(info)
}

/// Running equal average of parameter checkpoints, maintained incrementally.
#[derive(Debug, Clone)]
pub struct SwaState {
    mean: ParamStore,
    count: u64,
    /// Fraction of training whose checkpoints enter the average.
    pub window_frac: f64,
}

impl SwaState {
    pub fn new(template: &ParamStore) -> Self {
        let mut mean = template.clone();
        for i in 0..mean.len() {
            mean.tensor_mut(i).data_mut().fill(0.0);
        }
        SwaState { mean, count: 0, window_frac: 0.5 }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// The averaged parameters; valid once count > 0.
    pub fn mean(&self) -> &ParamStore {
        &self.mean
    }
}

/// Fold one checkpoint into the running average: mean += (ckpt - mean)/(n+1).
pub fn swa_update(state: &mut SwaState, checkpoint: &ParamStore) -> Result<()> {
    if checkpoint.len() != state.mean.len() {
        return Err(OptError::GradCount { got: checkpoint.len(), want: state.mean.len() });
    }
    let n1 = (state.count + 1) as f64;
    for i in 0..checkpoint.len() {
        if checkpoint.tensor(i).shape() != state.mean.tensor(i).shape() {
            return Err(OptError::StateShape {
                name: checkpoint.entry(i).name.clone(),
                state: state.mean.tensor(i).shape().to_vec(),
                param: checkpoint.tensor(i).shape().to_vec(),
            });
        }
        let mean = state.mean.tensor_mut(i).data_mut();
        for (m, &c) in mean.iter_mut().zip(checkpoint.tensor(i).data()) {
            *m += (c - *m) / n1;
        }
    }
    state.count += 1;
    Ok(())
}

/// Which evaluation points enter the equal average: those in the second half
/// of the training window (epoch position strictly greater than half the
/// total epochs).
pub fn swa_schedule(total_epochs: usize, eval_points: &[f64]) -> Result<Vec<f64>> {
    if eval_points.len() < 2 {
        return Err(OptError::TooFewEvalPoints(eval_points.len()));
    }
    let threshold = total_epochs as f64 / 2.0;
    Ok(eval_points.iter().copied().filter(|&p| p > threshold).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegKind {
    None,
    L1,
}

#[derive(Debug, Clone, Copy)]
pub struct RegularizerSpec {
    pub kind: RegKind,
    pub coeff: f64,
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        RegularizerSpec { kind: RegKind::None, coeff: 0.0 }
    }
}

/// Add the configured penalty over prunable parameters to a recorded loss.
/// `RegKind::None` (or a zero coefficient) returns the base loss unchanged.
pub fn regularized_loss(
    tape: &mut Tape,
    base_loss: VarId,
    param_leaves: &[VarId],
    params: &ParamStore,
    reg: &RegularizerSpec,
) -> TensorResult<VarId> {
    match reg.kind {
        RegKind::None => Ok(base_loss),
        RegKind::L1 => {
            if reg.coeff == 0.0 {
                return Ok(base_loss);
            }
            let mut total: Option<VarId> = None;
            for (i, e) in params.entries().iter().enumerate() {
                if !e.prunable {
                    continue;
                }
                let n = tape.l1_norm(param_leaves[i])?;
                total = Some(match total {
                    None => n,
                    Some(acc) => tape.add(acc, n)?,
                });
            }
            match total {
                None => Ok(base_loss),
                Some(t) => {
                    let scaled = tape.mul_scalar(t, reg.coeff)?;
                    tape.add(base_loss, scaled)
                }
            }
        }
    }
}
