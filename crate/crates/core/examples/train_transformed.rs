//! Transformed-gradient training: full weights are updated with SᵀΔ, where
//! S is refreshed from the SVD of the current gradient every 20 steps.

use dualtrain::model::{LayerSpec, Mlp, Nonlinearity, SyntheticTask, TaskKind, TaskSpec};
use dualtrain::optim::OptimizerKind;
use dualtrain::rng::Rng;
use dualtrain::trainer::{train_transformed, TrainConfig, TransformSpec};
use dualtrain::transform::TransformFamily;

fn main() -> dualtrain::Result<()> {
    let spec = TaskSpec {
        kind: TaskKind::Classification { classes: 4 },
        in_dim: 12,
        out_dim: 0,
        teacher_hidden: vec![12],
        batch_size: 64,
        num_batches: None,
        noise: 0.0,
    };
    let task = SyntheticTask::new(3, spec.clone())?;
    let mlp = Mlp::new(
        vec![
            LayerSpec::new(12, 24, Nonlinearity::Relu, true),
            LayerSpec::new(24, 4, Nonlinearity::Identity, true),
        ],
        spec.loss(),
    )?;
    let init = mlp.init_params(&mut Rng::new(3, 1));
    let eval = task.eval_batch(512);

    for family in [TransformFamily::Svd, TransformFamily::TwoSidedSvd, TransformFamily::SemiOrthogonal] {
        let mut cfg = TrainConfig::new(150, OptimizerKind::adam(1e-2), TransformSpec { family, rank: 3 });
        cfg.merge_every = 20;
        cfg.seed = 3;
        let traj = train_transformed(&mlp, &task, &init, &cfg)?;
        println!(
            "{:<16} trainable {:>4}  train loss {:.4}  eval loss {:.4}",
            family.name(),
            traj.trainable,
            traj.final_loss().unwrap_or(f64::NAN),
            mlp.loss(&traj.final_params, &eval)?
        );
    }
    Ok(())
}
