//! Decaying the adapter is not the same as decaying the full weight. The
//! mismatched pairing separates the views on the first step by λ·max|W₀|;
//! either matched pairing keeps them together.

use dualtrain::model::{LayerSpec, Mlp, Nonlinearity, SyntheticTask, TaskKind, TaskSpec};
use dualtrain::optim::OptimizerKind;
use dualtrain::rng::Rng;
use dualtrain::trainer::{equivalence_harness, DecayPairing, HarnessOptions, TrainConfig, TransformSpec};
use dualtrain::transform::TransformFamily;

fn main() -> dualtrain::Result<()> {
    let spec = TaskSpec {
        kind: TaskKind::Regression,
        in_dim: 8,
        out_dim: 4,
        teacher_hidden: vec![8],
        batch_size: 16,
        num_batches: None,
        noise: 0.01,
    };
    let task = SyntheticTask::new(5, spec.clone())?;
    let mlp = Mlp::new(
        vec![
            LayerSpec::new(8, 16, Nonlinearity::Tanh, true),
            LayerSpec::new(16, 4, Nonlinearity::Identity, true),
        ],
        spec.loss(),
    )?;
    let init = mlp.init_params(&mut Rng::new(5, 1));
    let cfg = TrainConfig::new(60, OptimizerKind::adam(5e-3), TransformSpec { family: TransformFamily::Gaussian, rank: 2 });

    for pairing in DecayPairing::ALL {
        let opts = HarnessOptions { pairing, lambda: 0.1, initial_adapter: None };
        let r = equivalence_harness(&mlp, &task, &init, &cfg, &opts)?;
        println!(
            "{:<20} step-1 gap {:.3e} (predicted {:.3e})  max dev {:.3e}",
            pairing.name(),
            r.step1_abs_deviation,
            r.predicted_step1,
            r.max_param_deviation
        );
    }
    Ok(())
}
