//! Ad-hoc probe for structured pruning dynamics. Not part of the test suite.

use flatcomp_core::data::{generate, GeneratorId, TaskSpec};
use flatcomp_core::model::{build_model, Activation, ModelSpec};
use flatcomp_core::structured::{structured_prune_train, DistillPair, StructuredPruneConfig};
use flatcomp_core::train::{train, TrainConfig};

fn main() {
    let task = TaskSpec {
        generator: GeneratorId::SeqMajority,
        n_train: 512,
        n_val: 256,
        n_test: 256,
        noise: 0.0,
        seed: 11,
        seq_len: 16,
    };
    let (tr, val, _) = generate(&task).unwrap();
    let spec = ModelSpec::Transformer {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_ff: 64,
        vocab: 3,
        max_len: 17,
        n_classes: 2,
        activation: Activation::Gelu,
        init_seed: 5,
    };
    let init = build_model(&spec).unwrap();
    let t0 = std::time::Instant::now();
    let teacher_cfg = TrainConfig { epochs: 15, seed: 2, ..Default::default() };
    let teacher = train(&init, &tr, &val, &teacher_cfg, None).unwrap();
    println!("teacher: val {:.4} in {:?}", teacher.best_val_metric, t0.elapsed());

    for (lambda_lr, gate_lr, prune_epochs) in [(0.2, 0.05, 10), (0.5, 0.1, 10), (1.0, 0.1, 16)] {
        let cfg = StructuredPruneConfig {
            target_sparsity: 0.95,
            lambda_lr,
            gate_lr,
            prune_epochs,
            finetune_epochs: 6,
            seed: 7,
            ..Default::default()
        };
        let pair = DistillPair { teacher: teacher.best_params.clone(), student: init.clone() };
        let t0 = std::time::Instant::now();
        match structured_prune_train(&pair, &cfg, &tr, &val) {
            Ok(out) => println!(
                "llr={lambda_lr} glr={gate_lr} ep={prune_epochs}: sparsity {:.4} (target 0.95, ok={}), val {:.4}, lambda {:.2} [{:?}]",
                out.sparsity, out.within_tolerance, out.val_metric, out.final_lambda, t0.elapsed()
            ),
            Err(e) => println!("llr={lambda_lr} glr={gate_lr}: FAILED {e}"),
        }
    }
}
