//! Low-rank `W₀ + B A` baseline with periodic merges.
//!
//! In [`ReloraMode::TwoSided`] both factors train, `B` starting at zero and
//! `A` Gaussian. In [`ReloraMode::FrozenProjector`] one factor is a frozen
//! one-sided projector from the configured transform family and the other
//! starts at zero, which is the one-sided adapter written in factored form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{BatchSource, Mlp, ModelParams};
use crate::optim::{DecayMode, OptimizerState};
use crate::rng::Rng;
use crate::transform::{transform_stream, TransformAssignment, TransformKind};

use super::{check_finite, mean_grad, microbatch_grads, next_state, MergeEvent, StepRecord, TrainConfig, Trajectory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReloraMode {
    #[default]
    TwoSided,
    FrozenProjector,
}

#[derive(Clone, Debug, PartialEq)]
struct Factors {
    /// `m x r`
    b: Matrix,
    /// `r x n`
    a: Matrix,
    train_b: bool,
    train_a: bool,
}

impl Factors {
    fn trainable(&self) -> usize {
        self.train_b as usize * self.b.len() + self.train_a as usize * self.a.len()
    }
}

pub struct ReloraRun<'a> {
    mlp: &'a Mlp,
    cfg: TrainConfig,
    mode: ReloraMode,
    pub base: ModelParams,
    factors: Vec<Factors>,
    /// Bias deltas, trained directly.
    bias_delta: Vec<Option<Vec<f64>>>,
    pub state: OptimizerState,
    pub step: usize,
    pub merges: Vec<MergeEvent>,
}

impl<'a> ReloraRun<'a> {
    pub fn new(
        mlp: &'a Mlp,
        source: &dyn BatchSource,
        cfg: TrainConfig,
        mode: ReloraMode,
        params: ModelParams,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.decay != DecayMode::None {
            return Err(Error::Config("the low-rank baseline does not support weight decay".into()));
        }
        let factors = match mode {
            ReloraMode::TwoSided => two_sided_factors(mlp, &cfg, 0),
            ReloraMode::FrozenProjector => {
                projector_factors(&super::initial_transforms(mlp, source, &cfg, &params)?)?
            }
        };
        let bias_delta = params
            .layers
            .iter()
            .map(|l| l.bias.as_ref().map(|b| vec![0.0; b.len()]))
            .collect();
        let mut run = ReloraRun {
            mlp,
            mode,
            base: params,
            factors,
            bias_delta,
            state: OptimizerState::new(cfg.optimizer, 0),
            cfg,
            step: 0,
            merges: Vec::new(),
        };
        run.state = OptimizerState::new(run.cfg.optimizer, run.trainable_count());
        Ok(run)
    }

    /// Factor entries that train, biases excluded.
    pub fn factor_count(&self) -> usize {
        self.factors.iter().map(Factors::trainable).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.factor_count() + self.bias_delta.iter().map(|b| b.as_ref().map_or(0, Vec::len)).sum::<usize>()
    }

    pub fn effective_params(&self) -> Result<ModelParams> {
        let mut out = self.base.clone();
        for ((layer, f), db) in out.layers.iter_mut().zip(&self.factors).zip(&self.bias_delta) {
            layer.weight.add_assign(&f.b.matmul(&f.a)?)?;
            if let (Some(b), Some(d)) = (&mut layer.bias, db) {
                for (x, y) in b.iter_mut().zip(d) {
                    *x += y;
                }
            }
        }
        Ok(out)
    }

    fn pack_grad(&self, g: &ModelParams) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.trainable_count());
        for ((f, layer), db) in self.factors.iter().zip(&g.layers).zip(&self.bias_delta) {
            if f.train_b {
                out.extend_from_slice(layer.weight.matmul_t(&f.a)?.as_slice());
            }
            if f.train_a {
                out.extend_from_slice(f.b.t_matmul(&layer.weight)?.as_slice());
            }
            if db.is_some() {
                out.extend_from_slice(layer.bias.as_deref().unwrap_or_default());
            }
        }
        Ok(out)
    }

    fn apply_update(&mut self, update: &[f64]) {
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            for (x, d) in dst.iter_mut().zip(&update[at..]) {
                *x += d;
            }
            at += dst.len();
        };
        for (f, db) in self.factors.iter_mut().zip(&mut self.bias_delta) {
            if f.train_b {
                take(f.b.as_mut_slice());
            }
            if f.train_a {
                take(f.a.as_mut_slice());
            }
            if let Some(d) = db {
                take(d);
            }
        }
    }

    pub fn step(&mut self, source: &dyn BatchSource) -> Result<StepRecord> {
        let t = self.step;
        let batches = self.cfg.microbatches(source, t);
        let params = self.effective_params()?;
        let (loss, grads) = microbatch_grads(self.mlp, &params, &batches)?;
        check_finite(loss, t)?;
        if self.cfg.refreshes_at(t) {
            self.base = params.clone();
            for d in self.bias_delta.iter_mut().flatten() {
                d.iter_mut().for_each(|x| *x = 0.0);
            }
            self.factors = match self.mode {
                ReloraMode::TwoSided => two_sided_factors(self.mlp, &self.cfg, self.cfg.epoch_of(t)),
                ReloraMode::FrozenProjector => {
                    projector_factors(&super::refreshed_transforms(self.mlp, &self.cfg, t, &mean_grad(&grads)?)?)?
                }
            };
            self.merges.push(MergeEvent { step: t, drift: 0.0 });
            self.state = next_state(&self.cfg, &self.state, self.trainable_count());
        }
        let mut acc = vec![0.0; self.trainable_count()];
        for g in &grads {
            for (a, x) in acc.iter_mut().zip(self.pack_grad(g)?) {
                *a += x;
            }
        }
        let k = grads.len() as f64;
        let grad: Vector = acc.into_iter().map(|x| x / k).collect::<Vec<_>>().into();
        let update = self.state.step_in_place(&grad)?;
        self.apply_update(&update);
        self.step += 1;
        Ok(StepRecord {
            step: t,
            loss,
            grad_norm: grad.norm(),
            params_fingerprint: self.effective_params()?.fingerprint(),
            state_fingerprint: self.state.fingerprint(),
        })
    }
}

fn two_sided_factors(mlp: &Mlp, cfg: &TrainConfig, epoch: u64) -> Vec<Factors> {
    mlp.layers
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let (m, n) = s.weight_shape();
            let r = cfg.transform.rank.min(m.min(n)).max(1);
            let mut rng = Rng::from_id(transform_stream(cfg.seed, l, epoch, 0));
            let k = 1.0 / (n as f64).sqrt();
            Factors {
                b: Matrix::zeros(m, r),
                a: Matrix::from_fn(r, n, |_, _| k * rng.normal()),
                train_b: true,
                train_a: true,
            }
        })
        .collect()
}

fn projector_factors(t: &TransformAssignment) -> Result<Vec<Factors>> {
    t.layers
        .iter()
        .map(|layer| {
            let (m, n) = layer.param_shape();
            match &layer.kind {
                TransformKind::LeftOnly { p } => Ok(Factors {
                    b: p.transpose(),
                    a: Matrix::zeros(p.rows(), n),
                    train_b: false,
                    train_a: true,
                }),
                TransformKind::RightOnly { p } => Ok(Factors {
                    b: Matrix::zeros(m, p.cols()),
                    a: p.transpose(),
                    train_b: true,
                    train_a: false,
                }),
                _ => Err(Error::Config(format!(
                    "frozen-projector baseline needs a one-sided family, got {}",
                    layer.family.name()
                ))),
            }
        })
        .collect()
}

pub fn train_relora_baseline(
    mlp: &Mlp,
    source: &dyn BatchSource,
    init: &ModelParams,
    cfg: &TrainConfig,
    mode: ReloraMode,
) -> Result<Trajectory> {
    let mut run = ReloraRun::new(mlp, source, cfg.clone(), mode, init.clone())?;
    let mut records = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();
    for t in 0..cfg.steps {
        records.push(run.step(source)?);
        if cfg.snapshot_every > 0 && (t + 1) % cfg.snapshot_every == 0 {
            snapshots.push((t + 1, run.effective_params()?));
        }
    }
    Ok(Trajectory {
        records,
        snapshots,
        trainable: run.trainable_count(),
        final_params: run.effective_params()?,
        final_state: run.state,
        merges: run.merges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, LossKind, Nonlinearity, SyntheticTask, TaskKind, TaskSpec};
    use crate::optim::OptimizerKind;
    use crate::trainer::{train_adapter, TransformSpec};
    use crate::transform::TransformFamily;

    fn setup(hidden: Nonlinearity) -> (Mlp, SyntheticTask, ModelParams) {
        let task = SyntheticTask::new(
            9,
            TaskSpec {
                kind: TaskKind::Regression,
                in_dim: 6,
                out_dim: 4,
                teacher_hidden: vec![],
                batch_size: 16,
                num_batches: None,
                noise: 0.0,
            },
        )
        .unwrap();
        let mlp = Mlp::new(
            vec![
                LayerSpec::new(6, 9, hidden, true),
                LayerSpec::new(9, 4, Nonlinearity::Identity, true),
            ],
            LossKind::Mse,
        )
        .unwrap();
        let params = mlp.init_params(&mut Rng::new(4, 4));
        (mlp, task, params)
    }

    #[test]
    fn starts_at_base_and_counts_factors() {
        let (mlp, task, params) = setup(Nonlinearity::Tanh);
        let cfg = TrainConfig::new(0, OptimizerKind::adam(1e-2), TransformSpec { family: TransformFamily::Gaussian, rank: 3 });
        let run = ReloraRun::new(&mlp, &task, cfg, ReloraMode::TwoSided, params.clone()).unwrap();
        assert_eq!(run.effective_params().unwrap(), params);
        assert_eq!(run.factor_count(), 3 * (9 + 6) + 3 * (4 + 9));
    }

    #[test]
    fn loss_decreases_on_linear_regression() {
        // identity activations make the loss a convex quadratic in W
        let (mlp, task, params) = setup(Nonlinearity::Identity);
        let mut cfg = TrainConfig::new(100, OptimizerKind::adam(1e-2), TransformSpec { family: TransformFamily::Gaussian, rank: 2 });
        cfg.merge_every = 25;
        let traj = train_relora_baseline(&mlp, &task, &params, &cfg, ReloraMode::TwoSided).unwrap();
        let first = traj.records[0].loss;
        let last = traj.final_loss().unwrap();
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert_eq!(traj.merges.len(), 3);
    }

    #[test]
    fn frozen_projector_matches_adapter_training_across_merges() {
        let (mlp, task, params) = setup(Nonlinearity::Tanh);
        let mut cfg = TrainConfig::new(30, OptimizerKind::adam(1e-2), TransformSpec { family: TransformFamily::SemiOrthogonal, rank: 2 });
        cfg.merge_every = 10;
        let a = train_adapter(&mlp, &task, &params, &cfg).unwrap();
        let b = train_relora_baseline(&mlp, &task, &params, &cfg, ReloraMode::FrozenProjector).unwrap();
        let dev = a.final_params.sub(&b.final_params).unwrap().max_abs();
        assert!(dev < 1e-9, "{dev}");
    }
}
