//! Adapter training over an INT8 or NF4 frozen base, plus the round-trip
//! error of each format on the initial weights.

use dualtrain::model::{LayerSpec, Mlp, Nonlinearity, SyntheticTask, TaskKind, TaskSpec};
use dualtrain::optim::OptimizerKind;
use dualtrain::quant::{quantize_int8, quantize_nf4, Quantizer};
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
    let task = SyntheticTask::new(9, spec.clone())?;
    let mlp = Mlp::new(
        vec![
            LayerSpec::new(16, 32, Nonlinearity::Tanh, true),
            LayerSpec::new(32, 8, Nonlinearity::Identity, true),
        ],
        spec.loss(),
    )?;
    let init = mlp.init_params(&mut Rng::new(9, 1));
    let eval = task.eval_batch(256);

    let w = &init.layers[0].weight;
    for q in [quantize_int8(w, 64)?, quantize_nf4(w, 64)?] {
        let err = q.dequantize()?.sub(w)?.max_abs();
        println!("{:<5} max round-trip error {:.2e}  bytes {}", q.format.name(), err, q.storage_bytes(4));
    }

    for quantizer in [Quantizer::Identity, Quantizer::Int8 { group_size: 64 }, Quantizer::Nf4 { group_size: 64 }] {
        let mut cfg = TrainConfig::new(120, OptimizerKind::adam(1e-2), TransformSpec { family: TransformFamily::Rademacher, rank: 4 });
        cfg.merge_every = 40;
        cfg.quantizer = quantizer;
        cfg.seed = 9;
        let traj = train_adapter(&mlp, &task, &init, &cfg)?;
        println!("{:<8} eval loss {:.4}", quantizer.name(), mlp.loss(&traj.final_params, &eval)?);
    }
    Ok(())
}
