//! Simulated multi-worker training with one-sided adapter workers and an
//! outer Nesterov optimizer on the averaged parameter change.
//!
//! Every round, all workers snapshot the global parameters, receive fresh
//! projectors, run `L` local adapter steps on their own data shard, and
//! report `Pᵀ A`. The mean report is the pseudo-gradient.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, random_orthogonal, Matrix};
use crate::model::{Batch, BatchSource, Mlp, ModelParams};
use crate::optim::{OptimizerSpec, OptimizerState};
use crate::reparam::AdapterSet;
use crate::rng::Rng;
use crate::trainer::{AdapterRun, StatePolicy, TrainConfig, TransformSpec};
use crate::transform::{
    make_semi_orthogonal, transform_stream, GradientTransform, Provenance, Side, TransformAssignment, TransformFamily,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every worker gets the same projector.
    Identical,
    /// Independent semi-orthogonal samples.
    Independent,
    /// Disjoint row blocks of one random orthogonal matrix.
    Distributed,
}

impl InitScheme {
    pub const ALL: [InitScheme; 3] = [InitScheme::Identical, InitScheme::Independent, InitScheme::Distributed];

    pub fn name(self) -> &'static str {
        match self {
            InitScheme::Identical => "identical",
            InitScheme::Independent => "independent",
            InitScheme::Distributed => "distributed",
        }
    }
}

/// `d x m` semi-orthogonal projectors for `workers` workers. Worker `k`
/// draws from `transform_stream(seed, layer, round, k)`; shared samples use
/// worker 0's stream.
pub fn init_projectors(
    scheme: InitScheme,
    seed: u64,
    layer: usize,
    round: u64,
    workers: usize,
    d: usize,
    m: usize,
) -> Result<Vec<Matrix>> {
    let rng = |k: usize| Rng::from_id(transform_stream(seed, layer, round, k as u64));
    match scheme {
        InitScheme::Identical => {
            let p = make_semi_orthogonal(&mut rng(0), d, m)?;
            Ok(vec![p; workers])
        }
        InitScheme::Independent => (0..workers).map(|k| make_semi_orthogonal(&mut rng(k), d, m)).collect(),
        InitScheme::Distributed => {
            if d == 0 || workers * d > m {
                return Err(Error::TooManyBlocks {
                    workers,
                    rank: d,
                    dim: m,
                });
            }
            let q = random_orthogonal(&mut rng(0), m);
            Ok((0..workers).map(|k| q.row_block(k * d, d)).collect())
        }
    }
}

/// Per-layer transforms for each worker.
fn worker_transforms(
    mlp: &Mlp,
    scheme: InitScheme,
    seed: u64,
    round: u64,
    workers: usize,
    d: usize,
) -> Result<Vec<TransformAssignment>> {
    let mut per_worker: Vec<Vec<GradientTransform>> = vec![Vec::new(); workers];
    for (l, spec) in mlp.layers.iter().enumerate() {
        let (rows, cols) = spec.weight_shape();
        let side_dim = Side::for_shape(rows, cols).dim(rows, cols);
        let ps = init_projectors(scheme, seed, l, round, workers, d.min(side_dim), side_dim)?;
        for (k, p) in ps.into_iter().enumerate() {
            let id = transform_stream(seed, l, round, k as u64);
            let mut t = GradientTransform::one_sided(p, rows, cols, Provenance::SemiOrthogonal(id))?;
            t.rank = d;
            per_worker[k].push(t);
        }
    }
    per_worker
        .into_iter()
        .map(|layers| TransformAssignment::new(layers, &mlp.layers))
        .collect()
}

fn default_local_steps() -> usize {
    500
}

fn default_eval() -> usize {
    256
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for OuterConfig {
    fn default() -> Self {
        OuterConfig { lr: 0.7, momentum: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistConfig {
    pub workers: usize,
    pub rank: usize,
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    pub rounds: usize,
    pub scheme: InitScheme,
    pub inner_optimizer: OptimizerSpec,
    #[serde(default)]
    pub outer: OuterConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval")]
    pub eval_batch_size: usize,
}

/// Nesterov momentum on the pseudo-gradient, treated as a descent
/// direction: `buf <- μ buf + pg`, `θ <- θ + η (pg + μ buf)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterOptimizer {
    pub lr: f64,
    pub momentum: f64,
    pub buffer: Option<ModelParams>,
}

impl OuterOptimizer {
    pub fn new(cfg: OuterConfig) -> Self {
        OuterOptimizer {
            lr: cfg.lr,
            momentum: cfg.momentum,
            buffer: None,
        }
    }

    pub fn step(&mut self, params: &ModelParams, pg: &ModelParams) -> Result<ModelParams> {
        let mu = self.momentum;
        let buffer = match &self.buffer {
            Some(b) => b.zip_with(pg, |b, g| mu * b + g)?,
            None => pg.clone(),
        };
        let dir = pg.zip_with(&buffer, |g, b| g + mu * b)?;
        let eta = self.lr;
        let next = params.zip_with(&dir, |p, d| p + eta * d)?;
        self.buffer = Some(buffer);
        Ok(next)
    }
}

/// One worker during a round.
pub struct WorkerState<'a> {
    pub id: usize,
    pub base_fingerprint: u64,
    pub run: AdapterRun<'a>,
    pub last_loss: f64,
    pub steps_done: usize,
}

impl<'a> WorkerState<'a> {
    fn new(
        mlp: &'a Mlp,
        cfg: &DistConfig,
        id: usize,
        round: usize,
        base: &ModelParams,
        transforms: TransformAssignment,
    ) -> Result<Self> {
        let mut tc = TrainConfig::new(
            cfg.local_steps,
            cfg.inner_optimizer,
            TransformSpec {
                family: TransformFamily::SemiOrthogonal,
                rank: cfg.rank,
            },
        );
        tc.merge_every = 0;
        tc.seed = cfg.seed;
        tc.shard = id as u64;
        tc.state_on_merge = StatePolicy::Reset;
        let set = AdapterSet::new(base.clone(), transforms)?;
        let mut run = AdapterRun::from_set(mlp, tc, set)?;
        // batch indices continue across rounds
        run.step = round * cfg.local_steps;
        run.state = OptimizerState::new(cfg.inner_optimizer, run.set.trainable_count());
        run.state.step = run.step as u64;
        Ok(WorkerState {
            id,
            base_fingerprint: base.fingerprint(),
            run,
            last_loss: f64::NAN,
            steps_done: 0,
        })
    }

    /// `steps` adapter steps on this worker's shard.
    pub fn local_round(&mut self, source: &dyn BatchSource, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.last_loss = self.run.step(source)?.loss;
            self.steps_done += 1;
        }
        Ok(())
    }

    /// `Pᵀ A` and bias deltas: effective minus base.
    pub fn delta(&self) -> Result<ModelParams> {
        self.run.set.transforms.expand(&self.run.set.lambda)
    }
}

/// Mean over workers, in worker-id order, of each worker's `Pᵀ A`.
pub fn pseudo_gradient(workers: &[WorkerState<'_>]) -> Result<ModelParams> {
    let first = workers.first().ok_or_else(|| Error::Desynchronized("no workers".into()))?;
    for w in workers {
        if w.steps_done != first.steps_done || w.base_fingerprint != first.base_fingerprint {
            return Err(Error::Desynchronized(format!(
                "worker {} at {} steps, worker {} at {}",
                w.id, w.steps_done, first.id, first.steps_done
            )));
        }
    }
    let mut acc = first.delta()?;
    for w in &workers[1..] {
        acc = acc.add(&w.delta()?)?;
    }
    let k = workers.len() as f64;
    Ok(acc.map(|x| x / k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub worker: usize,
    pub local_loss_end: f64,
    pub global_loss: f64,
    pub pg_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistReport {
    pub scheme: InitScheme,
    pub initial_loss: f64,
    pub rows: Vec<RoundMetrics>,
    /// Global eval loss after each round.
    pub global_losses: Vec<f64>,
    /// Mean over layers of rank(stacked projectors) / (K d), first round.
    pub coverage: f64,
    pub final_params: ModelParams,
}

impl DistReport {
    pub fn final_loss(&self) -> f64 {
        self.global_losses.last().copied().unwrap_or(self.initial_loss)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("round,worker,local_loss_end,global_loss,pg_norm\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.round, r.worker, r.local_loss_end, r.global_loss, r.pg_norm
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Stacked-projector rank relative to `K d`, averaged over layers.
pub fn coverage(transforms: &[TransformAssignment]) -> f64 {
    let layers = transforms[0].layers.len();
    let mut total = 0.0;
    for l in 0..layers {
        let blocks: Vec<Matrix> = transforms
            .iter()
            .map(|t| match &t.layers[l].kind {
                crate::transform::TransformKind::LeftOnly { p } => p.clone(),
                crate::transform::TransformKind::RightOnly { p } => p.transpose(),
                _ => unreachable!("workers use one-sided projectors"),
            })
            .collect();
        let stacked = Matrix::vstack(&blocks).expect("same side dimension");
        total += numerical_rank(&stacked, 1e-10) as f64 / stacked.rows() as f64;
    }
    total / layers as f64
}

pub fn run_distributed(
    mlp: &Mlp,
    source: &dyn BatchSource,
    eval: &Batch,
    init: &ModelParams,
    cfg: &DistConfig,
) -> Result<DistReport> {
    if cfg.workers == 0 || cfg.rank == 0 {
        return Err(Error::Config("distributed run needs workers >= 1 and rank >= 1".into()));
    }
    let mut params = init.clone();
    let mut outer = OuterOptimizer::new(cfg.outer);
    let initial_loss = mlp.loss(&params, eval)?;
    let mut rows = Vec::new();
    let mut global_losses = Vec::with_capacity(cfg.rounds);
    let mut cov = f64::NAN;
    for round in 0..cfg.rounds {
        let transforms = worker_transforms(mlp, cfg.scheme, cfg.seed, round as u64, cfg.workers, cfg.rank)?;
        if round == 0 {
            cov = coverage(&transforms);
        }
        let mut workers = transforms
            .into_iter()
            .enumerate()
            .map(|(k, t)| WorkerState::new(mlp, cfg, k, round, &params, t))
            .collect::<Result<Vec<_>>>()?;
        for w in &mut workers {
            w.local_round(source, cfg.local_steps)?;
        }
        let pg = pseudo_gradient(&workers)?;
        params = outer.step(&params, &pg)?;
        let global_loss = mlp.loss(&params, eval)?;
        if !global_loss.is_finite() {
            return Err(Error::NonFinite {
                what: "global loss",
                step: round,
            });
        }
        global_losses.push(global_loss);
        let pg_norm = pg.flatten().norm();
        for w in &workers {
            rows.push(RoundMetrics {
                round,
                worker: w.id,
                local_loss_end: w.last_loss,
                global_loss,
                pg_norm,
            });
        }
    }
    Ok(DistReport {
        scheme: cfg.scheme,
        initial_loss,
        rows,
        global_losses,
        coverage: cov,
        final_params: params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, LossKind, Nonlinearity, SyntheticTask, TaskKind, TaskSpec};
    use crate::optim::OptimizerKind;
    use crate::trainer::train_adapter;

    fn setup() -> (Mlp, SyntheticTask, ModelParams) {
        let task = SyntheticTask::new(
            1,
            TaskSpec {
                kind: TaskKind::Regression,
                in_dim: 8,
                out_dim: 8,
                teacher_hidden: vec![8],
                batch_size: 8,
                num_batches: None,
                noise: 0.0,
            },
        )
        .unwrap();
        let mlp = Mlp::new(
            vec![
                LayerSpec::new(8, 8, Nonlinearity::Tanh, true),
                LayerSpec::new(8, 8, Nonlinearity::Identity, true),
            ],
            LossKind::Mse,
        )
        .unwrap();
        let params = mlp.init_params(&mut Rng::new(3, 3));
        (mlp, task, params)
    }

    #[test]
    fn distributed_blocks_are_orthogonal() {
        let ps = init_projectors(InitScheme::Distributed, 1, 0, 0, 2, 2, 8).unwrap();
        let cross = ps[0].matmul_t(&ps[1]).unwrap();
        assert!(cross.max_abs() < 1e-12);
        for p in &ps {
            assert!(p.matmul_t(p).unwrap().sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-12);
        }
        assert!(matches!(
            init_projectors(InitScheme::Distributed, 1, 0, 0, 3, 3, 8),
            Err(Error::TooManyBlocks { .. })
        ));
    }

    #[test]
    fn identical_scheme_shares_bitwise() {
        let ps = init_projectors(InitScheme::Identical, 1, 0, 0, 3, 2, 8).unwrap();
        assert_eq!(ps[0], ps[1]);
        assert_eq!(ps[1], ps[2]);
        let ind = init_projectors(InitScheme::Independent, 1, 0, 0, 2, 2, 8).unwrap();
        assert_ne!(ind[0], ind[1]);
    }

    #[test]
    fn outer_step_plain_averaging_and_recursion() {
        let p = |x: f64| ModelParams {
            layers: vec![crate::model::LayerParams {
                weight: Matrix::from_rows(&[&[x]]),
                bias: None,
            }],
        };
        let mut o = OuterOptimizer::new(OuterConfig { lr: 1.0, momentum: 0.0 });
        assert_eq!(o.step(&p(1.0), &p(0.5)).unwrap(), p(1.5));

        // scalar recursion: b1 = g1, θ1 = θ0 + η(g1 + μ b1); b2 = μ b1 + g2, θ2 = θ1 + η(g2 + μ b2)
        let (eta, mu) = (0.7, 0.9);
        let mut o = OuterOptimizer::new(OuterConfig { lr: eta, momentum: mu });
        let t1 = o.step(&p(0.0), &p(1.0)).unwrap();
        let t2 = o.step(&t1, &p(-0.5)).unwrap();
        let b1 = 1.0;
        let th1 = eta * (1.0 + mu * b1);
        let b2 = mu * b1 - 0.5;
        let th2 = th1 + eta * (-0.5 + mu * b2);
        assert_eq!(t1, p(th1));
        assert!((t2.layers[0].weight[(0, 0)] - th2).abs() < 1e-15);

        // zero pseudo-gradients: params still move by the decaying buffer
        let mut o = OuterOptimizer::new(OuterConfig { lr: 1.0, momentum: 0.5 });
        o.step(&p(0.0), &p(0.0)).unwrap();
        assert_eq!(o.step(&p(2.0), &p(0.0)).unwrap(), p(2.0));
    }

    #[test]
    fn single_worker_matches_adapter_training() {
        let (mlp, task, params) = setup();
        let cfg = DistConfig {
            workers: 1,
            rank: 2,
            local_steps: 7,
            rounds: 3,
            scheme: InitScheme::Distributed,
            inner_optimizer: OptimizerKind::adam(1e-2).into(),
            outer: OuterConfig { lr: 1.0, momentum: 0.0 },
            seed: 4,
            eval_batch_size: 16,
        };
        let eval = task.eval_batch(16);
        let report = run_distributed(&mlp, &task, &eval, &params, &cfg).unwrap();
        let mut tc = TrainConfig::new(21, OptimizerKind::adam(1e-2), TransformSpec { family: TransformFamily::SemiOrthogonal, rank: 2 });
        tc.merge_every = 7;
        tc.seed = 4;
        let traj = train_adapter(&mlp, &task, &params, &tc).unwrap();
        let dev = traj.final_params.sub(&report.final_params).unwrap().max_abs();
        assert!(dev <= 1e-12, "{dev}");
    }

    #[test]
    fn pseudo_gradient_is_mean_of_differences() {
        let (mlp, task, params) = setup();
        let cfg = DistConfig {
            workers: 3,
            rank: 2,
            local_steps: 4,
            rounds: 1,
            scheme: InitScheme::Independent,
            inner_optimizer: OptimizerKind::adam(1e-2).into(),
            outer: OuterConfig::default(),
            seed: 2,
            eval_batch_size: 16,
        };
        let ts = worker_transforms(&mlp, cfg.scheme, cfg.seed, 0, 3, 2).unwrap();
        let mut workers: Vec<_> = ts
            .into_iter()
            .enumerate()
            .map(|(k, t)| WorkerState::new(&mlp, &cfg, k, 0, &params, t).unwrap())
            .collect();
        let zero = pseudo_gradient(&workers).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        for w in &mut workers {
            w.local_round(&task, 4).unwrap();
        }
        let pg = pseudo_gradient(&workers).unwrap();
        let mut direct = ModelParams::zeros(&mlp.layers);
        for w in &workers {
            direct = direct.add(&w.run.set.materialize().unwrap().sub(&params).unwrap()).unwrap();
        }
        let direct = direct.map(|x| x / 3.0);
        assert!(pg.sub(&direct).unwrap().max_abs() < 1e-12);

        workers[0].local_round(&task, 1).unwrap();
        assert!(matches!(pseudo_gradient(&workers), Err(Error::Desynchronized(_))));
    }

    #[test]
    fn zero_local_steps_change_nothing() {
        let (mlp, task, params) = setup();
        let cfg = DistConfig {
            workers: 2,
            rank: 2,
            local_steps: 0,
            rounds: 2,
            scheme: InitScheme::Distributed,
            inner_optimizer: OptimizerKind::adam(1e-2).into(),
            outer: OuterConfig::default(),
            seed: 2,
            eval_batch_size: 16,
        };
        let report = run_distributed(&mlp, &task, &task.eval_batch(16), &params, &cfg).unwrap();
        assert_eq!(report.final_params, params);
    }

    #[test]
    fn distributed_covers_k_times_d() {
        let (mlp, _, _) = setup();
        let ts = worker_transforms(&mlp, InitScheme::Distributed, 1, 0, 4, 2).unwrap();
        assert!((coverage(&ts) - 1.0).abs() < 1e-12);
        let ts = worker_transforms(&mlp, InitScheme::Identical, 1, 0, 4, 2).unwrap();
        assert!((coverage(&ts) - 0.25).abs() < 1e-12);
    }
}
