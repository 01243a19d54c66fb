//! Ad-hoc probe for training dynamics. Not part of the test suite.

use flatcomp_core::data::{generate, GeneratorId, TaskSpec};
use flatcomp_core::model::{build_model, Activation, ModelSpec};
use flatcomp_core::train::{train, OptimizerKind, TrainConfig};

fn main() {
    let task = TaskSpec {
        generator: GeneratorId::Moons,
        n_train: 2000,
        n_val: 500,
        n_test: 500,
        noise: 0.1,
        seed: 3,
        seq_len: 0,
    };
    let (tr, val, _) = generate(&task).unwrap();
    let spec = ModelSpec::Mlp {
        in_dim: 2,
        hidden: vec![16, 16],
        n_classes: 2,
        activation: Activation::Relu,
        init_seed: 1,
    };
    let init = build_model(&spec).unwrap();
    for (epochs, lr) in [(20, 2e-3), (50, 2e-3), (200, 2e-3), (50, 1e-2)] {
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Adam,
            epochs,
            lr,
            seed: 5,
            ..Default::default()
        };
        let t0 = std::time::Instant::now();
        let out = train(&init, &tr, &val, &cfg, None).unwrap();
        println!(
            "epochs={epochs} lr={lr}: best={:.4} (epoch {:.1}) final history: {:?} [{:?}]",
            out.best_val_metric,
            out.best_epoch,
            out.history.iter().rev().take(3).map(|h| (h.epoch, h.val_metric)).collect::<Vec<_>>(),
            t0.elapsed()
        );
    }
}
