//! Core library for flatness-vs-compression experiments on synthetic tasks:
//! a small f64 autodiff engine, MLP and transformer classifiers, sharpness-
//! aware and weight-averaged optimizers, magnitude and structured pruning,
//! post-training int8 quantization, and sharpness/loss-surface measurement.

pub mod data;
pub mod fd;
pub mod flatness;
pub mod model;
pub mod opt;
pub mod prune;
pub mod quant;
pub mod rng;
pub mod structured;
pub mod tensor;
pub mod train;
pub mod util;

pub use fd::{finite_diff_grad, finite_diff_vec, grad_rel_error};
pub use model::{
    build_model, load_checkpoint, model_forward, save_checkpoint, Activation, Batch, BatchInputs,
    Checkpoint, LossKind, ModelSpec, ParamStore,
};
pub use tensor::{Tape, Tensor, VarId};
