//! Product-form low-rank baseline (B·A factors, merged and restarted every
//! 30 steps) against projected adapter training at a comparable budget.

use dualtrain::model::{LayerSpec, Mlp, Nonlinearity, SyntheticTask, TaskKind, TaskSpec};
use dualtrain::optim::OptimizerKind;
use dualtrain::rng::Rng;
use dualtrain::trainer::{train_adapter, train_relora_baseline, ReloraMode, TrainConfig, TransformSpec};
use dualtrain::transform::TransformFamily;

fn main() -> dualtrain::Result<()> {
    let spec = TaskSpec {
        kind: TaskKind::Regression,
        in_dim: 16,
        out_dim: 16,
        teacher_hidden: vec![16],
        batch_size: 32,
        num_batches: None,
        noise: 0.01,
    };
    let task = SyntheticTask::new(4, spec.clone())?;
    let mlp = Mlp::new(
        vec![
            LayerSpec::new(16, 32, Nonlinearity::Tanh, true),
            LayerSpec::new(32, 16, Nonlinearity::Identity, true),
        ],
        spec.loss(),
    )?;
    let init = mlp.init_params(&mut Rng::new(4, 1));
    let eval = task.eval_batch(256);
    let transform = TransformSpec { family: TransformFamily::Gaussian, rank: 4 };
    let mut cfg = TrainConfig::new(150, OptimizerKind::adam(1e-2), transform);
    cfg.merge_every = 30;
    cfg.seed = 4;

    for mode in [ReloraMode::TwoSided, ReloraMode::FrozenProjector] {
        let traj = train_relora_baseline(&mlp, &task, &init, &cfg, mode)?;
        println!("relora {:<17} trainable {:>4}  eval {:.4}", format!("{mode:?}"), traj.trainable, mlp.loss(&traj.final_params, &eval)?);
    }
    // a frozen Gaussian A makes B·A the Gaussian adapter in product form
    let traj = train_adapter(&mlp, &task, &init, &cfg)?;
    println!("adapter {:<16} trainable {:>4}  eval {:.4}", "gaussian", traj.trainable, mlp.loss(&traj.final_params, &eval)?);
    Ok(())
}
