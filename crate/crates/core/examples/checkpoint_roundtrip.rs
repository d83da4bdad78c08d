//! Writes an adapter run's weights, adapter and optimizer moments to a
//! checkpoint directory, reads it back and checks the loss is unchanged.

use dualtrain::checkpoint::{Checkpoint, TensorData};
use dualtrain::model::{LayerSpec, Mlp, Nonlinearity, SyntheticTask, TaskKind, TaskSpec};
use dualtrain::optim::OptimizerKind;
use dualtrain::rng::Rng;
use dualtrain::trainer::{AdapterRun, TrainConfig, TransformSpec};
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
    let task = SyntheticTask::new(6, spec.clone())?;
    let mlp = Mlp::new(
        vec![
            LayerSpec::new(8, 12, Nonlinearity::Tanh, true),
            LayerSpec::new(12, 4, Nonlinearity::Identity, true),
        ],
        spec.loss(),
    )?;
    let init = mlp.init_params(&mut Rng::new(6, 1));
    let cfg = TrainConfig::new(40, OptimizerKind::adam(1e-2), TransformSpec { family: TransformFamily::SemiOrthogonal, rank: 2 });
    let mut run = AdapterRun::new(&mlp, &task, cfg, init)?;
    for _ in 0..40 {
        run.step(&task)?;
    }
    let params = run.set.materialize()?;

    let mut ckpt = Checkpoint::new(40);
    ckpt.meta = serde_json::json!({ "layers": mlp.layers });
    ckpt.push_params("params.", &params)?;
    ckpt.push("adapter.lambda", vec![run.set.lambda.len()], TensorData::F64(run.set.lambda.as_slice().to_vec()))?;
    ckpt.push_optimizer(&run.state)?;

    let dir = std::env::temp_dir().join(format!("dualtrain-ckpt-{}", std::process::id()));
    ckpt.write(&dir)?;
    let back = Checkpoint::read(&dir)?;
    let restored = back.params("params.", &mlp.layers)?;
    let eval = task.eval_batch(128);
    println!("tensors written: {}", back.tensors.len());
    println!("loss before {:.12}  after {:.12}", mlp.loss(&params, &eval)?, mlp.loss(&restored, &eval)?);
    println!("bitwise equal: {}", restored == params);
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
