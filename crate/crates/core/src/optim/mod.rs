//! Stateful optimizers of the form `(update, next_state) = step(grad, state)`.
//!
//! Updates are a pure function of the gradient and the state, and the state
//! has the dimensionality of whatever space is being optimized. That is what
//! lets one optimizer run unchanged on full parameters, on a compressed
//! gradient space, or on adapter parameters.

mod decay;

pub use decay::{apply_decay, DecayMode, DecayTarget, DecayView};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
    },
    Momentum {
        lr: f64,
        beta: f64,
    },
    /// Adam without bias correction.
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn base_lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr }
            | OptimizerKind::Momentum { lr, .. }
            | OptimizerKind::Adam { lr, .. } => lr,
        }
    }

    /// Floats of state kept per optimized coordinate.
    pub fn state_floats_per_param(&self) -> usize {
        match self {
            OptimizerKind::Sgd { .. } => 0,
            OptimizerKind::Momentum { .. } => 1,
            OptimizerKind::Adam { .. } => 2,
        }
    }
}

/// Optimizer hyperparameters plus an optional linear warmup.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    #[serde(default)]
    pub warmup_steps: u64,
}

impl From<OptimizerKind> for OptimizerSpec {
    fn from(kind: OptimizerKind) -> Self {
        OptimizerSpec {
            kind,
            warmup_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Moments {
    None,
    Velocity(Vector),
    Adam { mu: Vector, nu: Vector },
}

/// Optimizer memory for one optimized space.
///
/// `step` counts completed updates and drives the warmup schedule; it
/// survives [`OptimizerState::reset_moments`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub spec: OptimizerSpec,
    pub dim: usize,
    pub moments: Moments,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(spec: impl Into<OptimizerSpec>, dim: usize) -> Self {
        let spec = spec.into();
        OptimizerState {
            spec,
            dim,
            moments: fresh_moments(&spec.kind, dim),
            step: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Total number of floats held as state.
    pub fn num_floats(&self) -> usize {
        self.moment_slices().iter().map(|s| s.len()).sum()
    }

    pub fn moment_slices(&self) -> Vec<&[f64]> {
        match &self.moments {
            Moments::None => vec![],
            Moments::Velocity(v) => vec![v.as_slice()],
            Moments::Adam { mu, nu } => vec![mu.as_slice(), nu.as_slice()],
        }
    }

    /// FNV-1a over the moment bit patterns and the step counter.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::model::Fingerprint::default();
        h.write_u64(self.step);
        for s in self.moment_slices() {
            h.write_f64s(s);
        }
        h.finish()
    }

    /// Relative sup-norm distance between two states' moments:
    /// `max |a - b| / (1 + max |a|)`. States of different shape are
    /// infinitely far apart.
    pub fn deviation(&self, other: &OptimizerState) -> f64 {
        let (a, b) = (self.moment_slices(), other.moment_slices());
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.len() != y.len()) {
            return f64::INFINITY;
        }
        let mut diff = 0.0f64;
        let mut scale = 0.0f64;
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.iter().zip(y.iter()) {
                diff = diff.max((p - q).abs());
                scale = scale.max(p.abs());
            }
        }
        diff / (1.0 + scale)
    }

    /// Zeroes the moment estimates, keeping the schedule position.
    pub fn reset_moments(&mut self) {
        self.moments = fresh_moments(&self.spec.kind, self.dim);
    }

    /// Learning rate used by the next update.
    pub fn current_lr(&self) -> f64 {
        let lr = self.spec.kind.base_lr();
        match self.spec.warmup_steps {
            0 => lr,
            w => lr * ((self.step + 1) as f64 / w as f64).min(1.0),
        }
    }

    /// Computes the update for `grad` and advances the state in place.
    pub fn step_in_place(&mut self, grad: &[f64]) -> Result<Vector> {
        if grad.len() != self.dim {
            return Err(Error::shape("optimizer_step", self.dim, grad.len()));
        }
        let lr = self.current_lr();
        let update: Vec<f64> = match (&self.spec.kind, &mut self.moments) {
            (OptimizerKind::Sgd { .. }, Moments::None) => grad.iter().map(|g| -lr * g).collect(),
            (OptimizerKind::Momentum { beta, .. }, Moments::Velocity(v)) => v
                .iter_mut()
                .zip(grad)
                .map(|(vi, g)| {
                    *vi = beta * *vi + g;
                    -lr * *vi
                })
                .collect(),
            (
                OptimizerKind::Adam {
                    beta1, beta2, eps, ..
                },
                Moments::Adam { mu, nu },
            ) => grad
                .iter()
                .zip(mu.iter_mut().zip(nu.iter_mut()))
                .map(|(&g, (m, v))| {
                    *m = (1.0 - beta1) * g + beta1 * *m;
                    *v = (1.0 - beta2) * g * g + beta2 * *v;
                    -lr * *m / (v.sqrt() + eps)
                })
                .collect(),
            _ => unreachable!("moments always match the optimizer kind"),
        };
        self.step += 1;
        Ok(update.into())
    }
}

fn fresh_moments(kind: &OptimizerKind, dim: usize) -> Moments {
    match kind {
        OptimizerKind::Sgd { .. } => Moments::None,
        OptimizerKind::Momentum { .. } => Moments::Velocity(Vector::zeros(dim)),
        OptimizerKind::Adam { .. } => Moments::Adam {
            mu: Vector::zeros(dim),
            nu: Vector::zeros(dim),
        },
    }
}

/// Pure form of [`OptimizerState::step_in_place`].
pub fn optimizer_step(grad: &[f64], state: &OptimizerState) -> Result<(Vector, OptimizerState)> {
    let mut next = state.clone();
    let update = next.step_in_place(grad)?;
    Ok((update, next))
}
