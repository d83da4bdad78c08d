//! The two dual training loops and their shared configuration.
//!
//! [`TransformedRun`] keeps full parameters and runs the optimizer on the
//! compressed gradient `S ∇Θ`, adding `Sᵀ Δ` back. [`AdapterRun`] keeps a
//! frozen base and trains `Λ` in `Θ₀ + Sᵀ Λ`. Both are step machines so they
//! can be driven in lockstep by the equivalence harness.

mod harness;
mod relora;

pub use harness::{equivalence_harness, DecayPairing, EquivalenceReport, HarnessOptions};
pub use relora::{train_relora_baseline, ReloraMode, ReloraRun};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{Batch, BatchSource, Mlp, ModelParams};
use crate::optim::{apply_decay, DecayMode, DecayTarget, DecayView, OptimizerSpec, OptimizerState};
use crate::quant::Quantizer;
use crate::reparam::{AdapterSet, FrozenBase};
use crate::transform::{TransformAssignment, TransformFamily};

/// Which transform family, at what one-sided rank.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    pub family: TransformFamily,
    #[serde(default)]
    pub rank: usize,
}

/// What happens to optimizer moments when the transform is refreshed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatePolicy {
    #[default]
    Reset,
    Keep,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    /// Trainable values are rounded through `f32` after every update.
    F32,
}

fn default_merge_every() -> usize {
    200
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Steps between transform refreshes (merges). 0 never refreshes.
    #[serde(default = "default_merge_every")]
    pub merge_every: usize,
    #[serde(default = "one")]
    pub accumulation_microbatches: usize,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub decay: DecayMode,
    pub transform: TransformSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub state_on_merge: StatePolicy,
    /// Store full parameters every this many steps (0: final only).
    #[serde(default)]
    pub snapshot_every: usize,
    /// Storage of the frozen base in adapter training.
    #[serde(default)]
    pub quantizer: Quantizer,
    /// Data shard the run reads.
    #[serde(default)]
    pub shard: u64,
}

impl TrainConfig {
    pub fn new(steps: usize, optimizer: impl Into<OptimizerSpec>, transform: TransformSpec) -> Self {
        TrainConfig {
            steps,
            merge_every: default_merge_every(),
            accumulation_microbatches: 1,
            optimizer: optimizer.into(),
            decay: DecayMode::None,
            transform,
            seed: 0,
            precision: Precision::F64,
            state_on_merge: StatePolicy::Reset,
            snapshot_every: 0,
            quantizer: Quantizer::Identity,
            shard: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.accumulation_microbatches == 0 {
            return Err(Error::Config("accumulation_microbatches must be >= 1".into()));
        }
        if self.transform.family != TransformFamily::Identity && self.transform.rank == 0 {
            return Err(Error::Config("transform.rank must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether the transform is rebuilt at the start of step `t`.
    pub fn refreshes_at(&self, t: usize) -> bool {
        t > 0 && self.merge_every > 0 && t % self.merge_every == 0
    }

    pub fn epoch_of(&self, t: usize) -> u64 {
        if self.merge_every == 0 {
            0
        } else {
            (t / self.merge_every) as u64
        }
    }

    /// Microbatches consumed by step `t`.
    pub fn microbatches(&self, source: &dyn BatchSource, t: usize) -> Vec<Batch> {
        let k = self.accumulation_microbatches;
        (0..k).map(|i| source.batch(self.shard, (t * k + i) as u64)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean microbatch loss at the parameters before the update.
    pub loss: f64,
    /// Norm of the gradient in the optimized space.
    pub grad_norm: f64,
    pub params_fingerprint: u64,
    pub state_fingerprint: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub step: usize,
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<(usize, ModelParams)>,
    pub merges: Vec<MergeEvent>,
    pub final_params: ModelParams,
    pub final_state: OptimizerState,
    /// Trained scalars per step (size of the optimized space).
    pub trainable: usize,
}

impl Trajectory {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// `step,loss,grad_norm` lines with a header.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("step,loss,grad_norm\n");
        for r in &self.records {
            writeln!(out, "{},{},{}", r.step, r.loss, r.grad_norm).expect("writing to a String");
        }
        out
    }

    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.metrics_csv())?;
        Ok(())
    }
}

/// Mean loss and per-microbatch gradients at `params`.
fn microbatch_grads(mlp: &Mlp, params: &ModelParams, batches: &[Batch]) -> Result<(f64, Vec<ModelParams>)> {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batches.len());
    for b in batches {
        let (l, g) = mlp.loss_and_grad(params, b)?;
        loss += l;
        grads.push(g);
    }
    Ok((loss / batches.len() as f64, grads))
}

/// Left-to-right sum of gradients, divided by their count.
fn mean_grad(grads: &[ModelParams]) -> Result<ModelParams> {
    let mut acc = grads[0].clone();
    for g in &grads[1..] {
        acc = acc.add(g)?;
    }
    let k = grads.len() as f64;
    Ok(acc.map(|x| x / k))
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what: "loss", step })
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Transforms for the first window. Gradient-based families use the mean
/// gradient on step 0's microbatches.
pub fn initial_transforms(
    mlp: &Mlp,
    source: &dyn BatchSource,
    cfg: &TrainConfig,
    params: &ModelParams,
) -> Result<TransformAssignment> {
    let grad = if cfg.transform.family.needs_gradient() {
        let (_, grads) = microbatch_grads(mlp, params, &cfg.microbatches(source, 0))?;
        Some(mean_grad(&grads)?)
    } else {
        None
    };
    TransformAssignment::build(cfg.transform.family, cfg.transform.rank, &mlp.layers, cfg.seed, 0, grad.as_ref())
}

fn refreshed_transforms(mlp: &Mlp, cfg: &TrainConfig, t: usize, grad: &ModelParams) -> Result<TransformAssignment> {
    let g = cfg.transform.family.needs_gradient().then_some(grad);
    TransformAssignment::build(cfg.transform.family, cfg.transform.rank, &mlp.layers, cfg.seed, cfg.epoch_of(t), g)
}

fn next_state(cfg: &TrainConfig, old: &OptimizerState, dim: usize) -> OptimizerState {
    match cfg.state_on_merge {
        StatePolicy::Keep if old.dim() == dim => old.clone(),
        _ => {
            let mut s = OptimizerState::new(cfg.optimizer, dim);
            s.step = old.step;
            s
        }
    }
}

/// Full-parameter training on linearly transformed gradients.
pub struct TransformedRun<'a> {
    mlp: &'a Mlp,
    cfg: TrainConfig,
    pub params: ModelParams,
    pub transforms: TransformAssignment,
    pub state: OptimizerState,
    /// Implied adapter per layer, tracked for `TransformedMatched` decay.
    aux: Option<Vec<Matrix>>,
    pub step: usize,
}

impl<'a> TransformedRun<'a> {
    pub fn new(mlp: &'a Mlp, source: &dyn BatchSource, cfg: TrainConfig, params: ModelParams) -> Result<Self> {
        let transforms = initial_transforms(mlp, source, &cfg, &params)?;
        Self::with_transforms(mlp, cfg, params, transforms, None)
    }

    /// Starts from given transforms. `lambda0` seeds the implied adapter
    /// used by `TransformedMatched` decay.
    pub fn with_transforms(
        mlp: &'a Mlp,
        cfg: TrainConfig,
        params: ModelParams,
        transforms: TransformAssignment,
        lambda0: Option<&Vector>,
    ) -> Result<Self> {
        cfg.validate()?;
        cfg.decay.validate(DecayView::Transformed)?;
        let state = OptimizerState::new(cfg.optimizer, transforms.compressed_dim());
        let aux = if cfg.decay.needs_aux_state() {
            Some(match lambda0 {
                Some(l) => transforms.split(l)?.into_iter().map(|(a, _)| a).collect(),
                None => zero_adapters(&transforms),
            })
        } else {
            None
        };
        Ok(TransformedRun {
            mlp,
            cfg,
            params,
            transforms,
            state,
            aux,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&mut self, source: &dyn BatchSource) -> Result<StepRecord> {
        let t = self.step;
        let batches = self.cfg.microbatches(source, t);
        let (loss, grads) = microbatch_grads(self.mlp, &self.params, &batches)?;
        check_finite(loss, t)?;
        let grad = mean_grad(&grads)?;
        if self.cfg.refreshes_at(t) {
            self.transforms = refreshed_transforms(self.mlp, &self.cfg, t, &grad)?;
            self.state = next_state(&self.cfg, &self.state, self.transforms.compressed_dim());
            if let Some(aux) = &mut self.aux {
                *aux = zero_adapters(&self.transforms);
            }
        }
        let compressed = self.transforms.compress(&grad)?;
        let update = self.state.step_in_place(&compressed)?;
        let pre = self.params.clone();
        self.params = self.params.add(&self.transforms.expand(&update)?)?;

        let decay = self.cfg.decay;
        if decay.lambda() != 0.0 {
            let parts = self.transforms.split(&update)?;
            for l in 0..self.params.layers.len() {
                let aux_back = match &self.aux {
                    Some(aux) => Some(self.transforms.layers[l].apply_transpose(&aux[l])?),
                    None => None,
                };
                apply_decay(
                    decay,
                    DecayTarget::Transformed {
                        weight: &mut self.params.layers[l].weight,
                        pre_update: &pre.layers[l].weight,
                        aux_back: aux_back.as_ref(),
                    },
                )?;
                if let Some(aux) = &mut self.aux {
                    let a_pre = aux[l].clone();
                    aux[l].add_assign(&parts[l].0)?;
                    aux[l].axpy(-decay.lambda(), &a_pre)?;
                }
            }
        } else if let Some(aux) = &mut self.aux {
            for (a, (d, _)) in aux.iter_mut().zip(self.transforms.split(&update)?) {
                a.add_assign(&d)?;
            }
        }
        if self.cfg.precision == Precision::F32 {
            self.params = self.params.map(round_f32);
        }
        self.step += 1;
        Ok(StepRecord {
            step: t,
            loss,
            grad_norm: compressed.norm(),
            params_fingerprint: self.params.fingerprint(),
            state_fingerprint: self.state.fingerprint(),
        })
    }
}

fn zero_adapters(t: &TransformAssignment) -> Vec<Matrix> {
    t.layers
        .iter()
        .map(|l| {
            let (r, c) = l.compressed_shape();
            Matrix::zeros(r, c)
        })
        .collect()
}

/// Adapter training: only `Λ` moves.
pub struct AdapterRun<'a> {
    mlp: &'a Mlp,
    cfg: TrainConfig,
    pub set: AdapterSet,
    pub state: OptimizerState,
    pub step: usize,
    pub merges: Vec<MergeEvent>,
}

impl<'a> AdapterRun<'a> {
    pub fn new(mlp: &'a Mlp, source: &dyn BatchSource, cfg: TrainConfig, params: ModelParams) -> Result<Self> {
        let transforms = initial_transforms(mlp, source, &cfg, &params)?;
        let base = FrozenBase::quantize(&params, cfg.quantizer)?;
        let set = AdapterSet::over(base, transforms)?;
        Self::from_set(mlp, cfg, set)
    }

    pub fn from_set(mlp: &'a Mlp, cfg: TrainConfig, set: AdapterSet) -> Result<Self> {
        cfg.validate()?;
        cfg.decay.validate(DecayView::Adapter)?;
        let state = OptimizerState::new(cfg.optimizer, set.trainable_count());
        Ok(AdapterRun {
            mlp,
            cfg,
            set,
            state,
            step: 0,
            merges: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&mut self, source: &dyn BatchSource) -> Result<StepRecord> {
        let t = self.step;
        let batches = self.cfg.microbatches(source, t);
        let params = self.set.materialize()?;
        let (mut loss, mut grads) = microbatch_grads(self.mlp, &params, &batches)?;
        check_finite(loss, t)?;
        if self.cfg.refreshes_at(t) {
            let next = refreshed_transforms(self.mlp, &self.cfg, t, &mean_grad(&grads)?)?;
            let report = self.set.merge_and_reset(next)?;
            self.merges.push(MergeEvent {
                step: t,
                drift: report.drift,
            });
            self.state = next_state(&self.cfg, &self.state, self.set.trainable_count());
            if self.set.base.is_quantized() {
                (loss, grads) = microbatch_grads(self.mlp, &self.set.materialize()?, &batches)?;
            }
        }
        // accumulate in the compressed space
        let mut acc = vec![0.0; self.set.trainable_count()];
        for g in &grads {
            for (a, x) in acc.iter_mut().zip(self.set.transforms.compress(g)?.iter()) {
                *a += x;
            }
        }
        let k = grads.len() as f64;
        let lambda_grad: Vector = acc.into_iter().map(|x| x / k).collect::<Vec<_>>().into();

        let update = self.state.step_in_place(&lambda_grad)?;
        let pre = self.set.lambda.clone();
        for (x, d) in self.set.lambda.iter_mut().zip(update.iter()) {
            *x += d;
        }
        let decay = self.cfg.decay;
        if decay.lambda() != 0.0 {
            let pre_parts = self.set.transforms.split(&pre)?;
            let mut parts = self.set.transforms.split(&self.set.lambda)?;
            for (l, (a, _)) in parts.iter_mut().enumerate() {
                let base = match decay {
                    DecayMode::AdapterMatched(_) => Some(self.set.base.weight_mut(l)?),
                    _ => None,
                };
                apply_decay(
                    decay,
                    DecayTarget::Adapter {
                        adapter: a,
                        pre_update: &pre_parts[l].0,
                        base,
                    },
                )?;
            }
            self.set.lambda = self.set.transforms.join(&parts)?;
        }
        if self.cfg.precision == Precision::F32 {
            for x in self.set.lambda.iter_mut() {
                *x = round_f32(*x);
            }
        }
        self.step += 1;
        Ok(StepRecord {
            step: t,
            loss,
            grad_norm: lambda_grad.norm(),
            params_fingerprint: self.set.materialize()?.fingerprint(),
            state_fingerprint: self.state.fingerprint(),
        })
    }
}

pub fn train_transformed(
    mlp: &Mlp,
    source: &dyn BatchSource,
    init: &ModelParams,
    cfg: &TrainConfig,
) -> Result<Trajectory> {
    let mut run = TransformedRun::new(mlp, source, cfg.clone(), init.clone())?;
    let mut records = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();
    for t in 0..cfg.steps {
        records.push(run.step(source)?);
        if cfg.snapshot_every > 0 && (t + 1) % cfg.snapshot_every == 0 {
            snapshots.push((t + 1, run.params.clone()));
        }
    }
    let merges = (1..cfg.steps)
        .filter(|&t| cfg.refreshes_at(t))
        .map(|step| MergeEvent { step, drift: 0.0 })
        .collect();
    Ok(Trajectory {
        records,
        snapshots,
        merges,
        trainable: run.transforms.compressed_dim(),
        final_params: run.params,
        final_state: run.state,
    })
}

pub fn train_adapter(mlp: &Mlp, source: &dyn BatchSource, init: &ModelParams, cfg: &TrainConfig) -> Result<Trajectory> {
    let mut run = AdapterRun::new(mlp, source, cfg.clone(), init.clone())?;
    let mut records = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();
    for t in 0..cfg.steps {
        records.push(run.step(source)?);
        if cfg.snapshot_every > 0 && (t + 1) % cfg.snapshot_every == 0 {
            snapshots.push((t + 1, run.set.materialize()?));
        }
    }
    Ok(Trajectory {
        records,
        snapshots,
        trainable: run.set.trainable_count(),
        final_params: run.set.materialize()?,
        final_state: run.state,
        merges: run.merges,
    })
}
