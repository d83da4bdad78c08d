//! How well does each family reconstruct the gradient it compresses, and
//! does the best reconstruction give the best loss? Prints both.

use dualtrain::analysis::reconstruction_sweep;
use dualtrain::model::{LayerSpec, Mlp, Nonlinearity, SyntheticTask, TaskKind, TaskSpec};
use dualtrain::optim::OptimizerKind;
use dualtrain::rng::Rng;
use dualtrain::trainer::{TrainConfig, TransformSpec};
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
    let task = SyntheticTask::new(2, spec.clone())?;
    let mlp = Mlp::new(
        vec![
            LayerSpec::new(16, 32, Nonlinearity::Tanh, true),
            LayerSpec::new(32, 8, Nonlinearity::Identity, true),
        ],
        spec.loss(),
    )?;
    let init = mlp.init_params(&mut Rng::new(2, 1));
    let mut cfg = TrainConfig::new(200, OptimizerKind::adam(5e-3), TransformSpec { family: TransformFamily::Svd, rank: 4 });
    cfg.merge_every = 50;
    cfg.seed = 2;
    let families = [
        TransformFamily::Svd,
        TransformFamily::SemiOrthogonal,
        TransformFamily::Gaussian,
        TransformFamily::Rademacher,
    ];
    let sweep = reconstruction_sweep(&mlp, &task, &init, &cfg, &families, 10)?;

    println!("{:<16} {:>12} {:>8} {:>10}", "method", "mean err", "cosine", "final loss");
    for o in &sweep.outcomes {
        println!("{:<16} {:>12.4e} {:>8.3} {:>10.4}", o.method, o.mean_l2_sq, o.mean_cosine, o.final_loss);
    }
    println!("lowest error is lowest loss: {}", sweep.lowest_error_is_lowest_loss());
    Ok(())
}
