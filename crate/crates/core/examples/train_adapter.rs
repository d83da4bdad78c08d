//! Adapter training over a frozen base with Gaussian sketches, merging the
//! adapter into the base every 25 steps.

use dualtrain::model::{LayerSpec, Mlp, Nonlinearity, SyntheticTask, TaskKind, TaskSpec};
use dualtrain::optim::OptimizerKind;
use dualtrain::rng::Rng;
use dualtrain::trainer::{train_adapter, TrainConfig, TransformSpec};
use dualtrain::transform::TransformFamily;

fn main() -> dualtrain::Result<()> {
    let spec = TaskSpec {
        kind: TaskKind::Regression,
        in_dim: 16,
        out_dim: 8,
        teacher_hidden: vec![16],
        batch_size: 32,
        num_batches: None,
        noise: 0.01,
    };
    let task = SyntheticTask::new(7, spec.clone())?;
    let mlp = Mlp::new(
        vec![
            LayerSpec::new(16, 32, Nonlinearity::Tanh, true),
            LayerSpec::new(32, 8, Nonlinearity::Identity, true),
        ],
        spec.loss(),
    )?;
    let init = mlp.init_params(&mut Rng::new(7, 1));

    let mut cfg = TrainConfig::new(100, OptimizerKind::adam(1e-2), TransformSpec { family: TransformFamily::Gaussian, rank: 4 });
    cfg.merge_every = 25;
    cfg.seed = 7;
    let traj = train_adapter(&mlp, &task, &init, &cfg)?;

    let eval = task.eval_batch(256);
    println!("trainable scalars per step: {} of {}", traj.trainable, mlp.num_params());
    for r in traj.records.iter().step_by(20) {
        println!("step {:>3}  loss {:.4}", r.step, r.loss);
    }
    for m in &traj.merges {
        println!("merge at {:>3}", m.step);
    }
    println!("eval loss {:.4} -> {:.4}", mlp.loss(&init, &eval)?, mlp.loss(&traj.final_params, &eval)?);
    Ok(())
}
