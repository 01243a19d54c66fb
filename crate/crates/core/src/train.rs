//! Training loops shared by the pipelines: Adam, the sharpness-aware
//! wrapper, and checkpoint-averaged training, all with linear learning-rate
//! decay to zero and per-epoch evaluation.

use thiserror::Error;

use crate::data::{batches, ordered_batches, DataError, Dataset};
use crate::model::{build_forward, Batch, LossKind, ParamStore};
use crate::opt::{
    adam_step, regularized_loss, sam_step, swa_schedule, swa_update, AdamParams, AdamState,
    MaskView, OptError, RegularizerSpec, SamConfig, SwaState,
};
use crate::rng::derive_seed;
use crate::tensor::{Result as TensorResult, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sam,
    Swa,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sam => "sam",
            OptimizerKind::Swa => "swa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "sam" => Some(OptimizerKind::Sam),
            "swa" => Some(OptimizerKind::Swa),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; decays linearly to zero over the run unless
    /// `lr_decay` is off.
    pub lr: f64,
    pub lr_decay: bool,
    pub rho: f64,
    pub weight_decay: f64,
    pub regularizer: RegularizerSpec,
    pub loss_kind: LossKind,
    /// Evaluation cadence in epochs (0.5 evaluates twice per epoch).
    pub eval_every: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            lr_decay: true,
            rho: 0.05,
            weight_decay: 0.0,
            regularizer: RegularizerSpec::default(),
            loss_kind: LossKind::CrossEntropy,
            eval_every: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalPoint {
    pub epoch: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_params: ParamStore,
    pub best_val_metric: f64,
    pub best_val_loss: f64,
    pub best_epoch: f64,
    pub final_params: ParamStore,
    pub history: Vec<EvalPoint>,
    pub steps: u64,
}

/// Scalar loss and per-parameter gradients for one batch, including any
/// configured regularizer. Parameters untouched by the loss get zeros.
pub fn loss_and_grads(
    params: &ParamStore,
    batch: &Batch,
    loss_kind: LossKind,
    reg: &RegularizerSpec,
) -> TensorResult<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let (base, _logits, leaves) = build_forward(params, batch, loss_kind, &mut tape, None)?;
    let loss = regularized_loss(&mut tape, base, &leaves, params, reg)?;
    let mut grads = tape.backward(loss)?;
    let out = leaves
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(params.tensor(i).shape().to_vec()))
        })
        .collect();
    Ok((tape.value(loss).item(), out))
}

/// Mean loss and accuracy over a split, in stored order, without gradients.
pub fn evaluate(params: &ParamStore, ds: &Dataset, loss_kind: LossKind) -> Result<(f64, f64)> {
    let mut total_loss = 0.0;
    let mut total_correct = 0.0;
    let mut n = 0usize;
    for batch in ordered_batches(ds, 256)? {
        let (pass, metric) = crate::model::model_forward(params, &batch, loss_kind)?;
        let b = batch.len();
        total_loss += pass.tape.value(pass.loss).item() * b as f64;
        total_correct += metric * b as f64;
        n += b;
    }
    Ok((total_loss / n as f64, total_correct / n as f64))
}

/// Train a model from `init` (which must already respect `mask`, if any).
///
/// Evaluates on the cadence, retains the checkpoint with the best validation
/// metric, and for the averaging optimizer folds the checkpoints from the
/// second half of training into an equal average that becomes the result.
pub fn train(
    init: &ParamStore,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    mask: Option<&MaskView>,
) -> Result<TrainOutcome> {
    let mut params = init.clone();
    let mut adam = AdamState::new(
        &params,
        AdamParams { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
    );
    let sam = SamConfig { rho: cfg.rho };
    let shuffle_seed = derive_seed(cfg.seed, "shuffle");

    let steps_per_epoch = train_ds.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = (cfg.epochs as u64 * steps_per_epoch).max(1);

    // Evaluation step boundaries from the cadence.
    let mut eval_steps: Vec<(u64, f64)> = Vec::new();
    let mut k = 1u64;
    loop {
        let point = k as f64 * cfg.eval_every;
        if point > cfg.epochs as f64 + 1e-9 {
            break;
        }
        let step = ((point * steps_per_epoch as f64).round() as u64).min(total_steps);
        eval_steps.push((step.max(1), point));
        k += 1;
    }
    let eval_points: Vec<f64> = eval_steps.iter().map(|&(_, p)| p).collect();
    let swa_points: Vec<f64> = if cfg.optimizer == OptimizerKind::Swa {
        swa_schedule(cfg.epochs, &eval_points)?
    } else {
        Vec::new()
    };
    let mut swa = SwaState::new(&params);

    let mut history = Vec::new();
    let mut best: Option<(f64, f64, f64, ParamStore)> = None; // metric, loss, epoch, params
    let mut step = 0u64;
    let mut next_eval = 0usize;

    for epoch in 0..cfg.epochs as u64 {
        for batch in batches(train_ds, cfg.batch_size, shuffle_seed, epoch)? {
            let eff_lr = if cfg.lr_decay {
                cfg.lr * (1.0 - step as f64 / total_steps as f64)
            } else {
                cfg.lr
            };
            adam.set_lr(eff_lr);
            let step_result: Result<()> = match cfg.optimizer {
                OptimizerKind::Adam | OptimizerKind::Swa => {
                    let (_, mut grads) =
                        loss_and_grads(&params, &batch, cfg.loss_kind, &cfg.regularizer)?;
                    if let Some(view) = mask {
                        crate::opt::zero_masked_grads(&mut grads, view);
                    }
                    adam_step(&mut params, &grads, &mut adam, mask)?;
                    Ok(())
                }
                OptimizerKind::Sam => {
                    sam_step(
                        &mut params,
                        |ps| loss_and_grads(ps, &batch, cfg.loss_kind, &cfg.regularizer),
                        &sam,
                        &mut adam,
                        mask,
                    )?;
                    Ok(())
                }
            };
            step_result.map_err(|e| match e {
                TrainError::Tensor(t) => TrainError::Diverged { step, reason: t.to_string() },
                TrainError::Opt(OptError::Tensor(t)) => {
                    TrainError::Diverged { step, reason: t.to_string() }
                }
                TrainError::Opt(o @ OptError::PerturbedEval { .. }) => {
                    TrainError::Diverged { step, reason: o.to_string() }
                }
                other => other,
            })?;
            step += 1;

            while next_eval < eval_steps.len() && eval_steps[next_eval].0 == step {
                let (_, point) = eval_steps[next_eval];
                let (val_loss, val_metric) = evaluate(&params, val_ds, cfg.loss_kind)?;
                history.push(EvalPoint { epoch: point, val_loss, val_metric });
                let better = match &best {
                    None => true,
                    Some((m, ..)) => val_metric > *m,
                };
                if better {
                    best = Some((val_metric, val_loss, point, params.clone()));
                }
                if swa_points.iter().any(|&p| (p - point).abs() < 1e-9) {
                    swa_update(&mut swa, &params)?;
                }
                next_eval += 1;
            }
        }
    }

    if history.is_empty() {
        let (val_loss, val_metric) = evaluate(&params, val_ds, cfg.loss_kind)?;
        history.push(EvalPoint { epoch: cfg.epochs as f64, val_loss, val_metric });
        best = Some((val_metric, val_loss, cfg.epochs as f64, params.clone()));
    }

    if cfg.optimizer == OptimizerKind::Swa && swa.count() > 0 {
        // The averaged model is the run's product: evaluate and return it.
        let averaged = swa.mean().clone();
        let (val_loss, val_metric) = evaluate(&averaged, val_ds, cfg.loss_kind)?;
        history.push(EvalPoint { epoch: cfg.epochs as f64, val_loss, val_metric });
        return Ok(TrainOutcome {
            best_params: averaged.clone(),
            best_val_metric: val_metric,
            best_val_loss: val_loss,
            best_epoch: cfg.epochs as f64,
            final_params: averaged,
            history,
            steps: step,
        });
    }

    let (best_val_metric, best_val_loss, best_epoch, best_params) = best.unwrap();
    Ok(TrainOutcome {
        best_params,
        best_val_metric,
        best_val_loss,
        best_epoch,
        final_params: params,
        history,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorId, TaskSpec};
    use crate::model::{build_model, Activation, ModelSpec};

    fn moons_task() -> TaskSpec {
        TaskSpec {
            generator: GeneratorId::Moons,
            n_train: 256,
            n_val: 128,
            n_test: 128,
            noise: 0.1,
            seed: 11,
            seq_len: 0,
        }
    }

    fn mlp() -> ModelSpec {
        ModelSpec::Mlp {
            in_dim: 2,
            hidden: vec![16, 16],
            n_classes: 2,
            activation: Activation::Relu,
            init_seed: 1,
        }
    }

    #[test]
    fn adam_learns_moons_quickly() {
        let (tr, val, _) = generate(&moons_task()).unwrap();
        let init = build_model(&mlp()).unwrap();
        let cfg = TrainConfig { epochs: 80, seed: 5, ..Default::default() };
        let out = train(&init, &tr, &val, &cfg, None).unwrap();
        assert!(out.best_val_metric >= 0.9, "metric {}", out.best_val_metric);
        assert_eq!(out.steps, 80 * 8);
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, val, _) = generate(&moons_task()).unwrap();
        let init = build_model(&mlp()).unwrap();
        let cfg = TrainConfig { epochs: 3, seed: 5, ..Default::default() };
        let a = train(&init, &tr, &val, &cfg, None).unwrap();
        let b = train(&init, &tr, &val, &cfg, None).unwrap();
        assert!(a.final_params.bit_eq(&b.final_params));
        assert_eq!(a.best_val_metric, b.best_val_metric);
    }

    #[test]
    fn sam_runs_and_differs_from_adam() {
        let (tr, val, _) = generate(&moons_task()).unwrap();
        let init = build_model(&mlp()).unwrap();
        let adam_cfg = TrainConfig { epochs: 2, seed: 5, ..Default::default() };
        let sam_cfg =
            TrainConfig { optimizer: OptimizerKind::Sam, epochs: 2, seed: 5, ..Default::default() };
        let a = train(&init, &tr, &val, &adam_cfg, None).unwrap();
        let s = train(&init, &tr, &val, &sam_cfg, None).unwrap();
        assert!(!a.final_params.bit_eq(&s.final_params));
    }

    #[test]
    fn swa_returns_average_of_late_checkpoints() {
        let (tr, val, _) = generate(&moons_task()).unwrap();
        let init = build_model(&mlp()).unwrap();
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Swa,
            epochs: 4,
            seed: 5,
            ..Default::default()
        };
        let out = train(&init, &tr, &val, &cfg, None).unwrap();
        assert!(out.best_val_metric > 0.7, "metric {}", out.best_val_metric);
        assert!(out.best_params.bit_eq(&out.final_params));
    }
}
