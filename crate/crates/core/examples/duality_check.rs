//! Runs the transformed-gradient and adapter views side by side for every
//! transform family and reports how far apart their trajectories drift.

use dualtrain::model::{LayerSpec, Mlp, Nonlinearity, SyntheticTask, TaskKind, TaskSpec};
use dualtrain::optim::OptimizerKind;
use dualtrain::rng::Rng;
use dualtrain::trainer::{equivalence_harness, HarnessOptions, TrainConfig, TransformSpec};
use dualtrain::transform::TransformFamily;

fn main() -> dualtrain::Result<()> {
    let spec = TaskSpec {
        kind: TaskKind::Regression,
        in_dim: 10,
        out_dim: 6,
        teacher_hidden: vec![10],
        batch_size: 16,
        num_batches: None,
        noise: 0.01,
    };
    let task = SyntheticTask::new(11, spec.clone())?;
    let mlp = Mlp::new(
        vec![
            LayerSpec::new(10, 20, Nonlinearity::Tanh, true),
            LayerSpec::new(20, 20, Nonlinearity::Tanh, true),
            LayerSpec::new(20, 6, Nonlinearity::Identity, true),
        ],
        spec.loss(),
    )?;
    let init = mlp.init_params(&mut Rng::new(11, 1));

    println!("{:<20} {:>12} {:>12}", "family", "param dev", "state dev");
    for family in TransformFamily::ALL {
        let mut cfg = TrainConfig::new(100, OptimizerKind::Momentum { lr: 1e-2, beta: 0.9 }, TransformSpec { family, rank: 2 });
        cfg.merge_every = 30;
        cfg.seed = 11;
        let r = equivalence_harness(&mlp, &task, &init, &cfg, &HarnessOptions::default())?;
        println!("{:<20} {:>12.2e} {:>12.2e}", family.name(), r.max_param_deviation, r.max_state_deviation);
    }
    Ok(())
}
