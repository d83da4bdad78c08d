//! Runs the transformed-gradient and adapter loops side by side and measures
//! how far apart their trajectories drift.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::Vector;
use crate::model::{BatchSource, Mlp, ModelParams};
use crate::optim::DecayMode;
use crate::reparam::AdapterSet;

use super::{initial_transforms, AdapterRun, TrainConfig, TransformedRun};

/// Which decay modes the two runs use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayPairing {
    #[default]
    None,
    /// Each run decays its own trainable view; the runs are expected to
    /// differ.
    Mismatched,
    /// Adapter run also decays its base.
    AdapterMatched,
    /// Transformed run decays only the implied adapter.
    TransformedMatched,
}

impl DecayPairing {
    pub const ALL: [DecayPairing; 4] = [
        DecayPairing::None,
        DecayPairing::Mismatched,
        DecayPairing::AdapterMatched,
        DecayPairing::TransformedMatched,
    ];

    /// `(transformed mode, adapter mode)`.
    pub fn modes(self, lambda: f64) -> (DecayMode, DecayMode) {
        match self {
            DecayPairing::None => (DecayMode::None, DecayMode::None),
            DecayPairing::Mismatched => (DecayMode::TransformedView(lambda), DecayMode::AdapterView(lambda)),
            DecayPairing::AdapterMatched => (DecayMode::TransformedView(lambda), DecayMode::AdapterMatched(lambda)),
            DecayPairing::TransformedMatched => {
                (DecayMode::TransformedMatched(lambda), DecayMode::AdapterView(lambda))
            }
        }
    }

    pub fn expects_equivalence(self) -> bool {
        self != DecayPairing::Mismatched
    }

    pub fn name(self) -> &'static str {
        match self {
            DecayPairing::None => "none",
            DecayPairing::Mismatched => "mismatched",
            DecayPairing::AdapterMatched => "adapter_matched",
            DecayPairing::TransformedMatched => "transformed_matched",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HarnessOptions {
    pub pairing: DecayPairing,
    pub lambda: f64,
    /// Nonzero starting adapter. The adapter base becomes `Θ₀ - Sᵀ Λ₀` so
    /// both runs start from the same effective parameters.
    pub initial_adapter: Option<Vector>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessStep {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub deviation: f64,
    pub state_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub pairing: DecayPairing,
    /// `max_t ‖Θ_T - Θ_A‖∞ / (1 + ‖Θ_T‖∞)`.
    pub max_param_deviation: f64,
    /// Max relative sup-norm distance of the optimizer moments.
    pub max_state_deviation: f64,
    /// `‖Θ_T - Θ_A‖∞` after the first step.
    pub step1_abs_deviation: f64,
    /// `λ ‖W₀ - Sᵀ A₀‖∞` over weight matrices: the predicted first-step gap
    /// for mismatched decay, zero otherwise.
    pub predicted_step1: f64,
    pub steps: Vec<HarnessStep>,
    pub final_params_transformed: ModelParams,
    pub final_params_adapter: ModelParams,
}

impl EquivalenceReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("step,loss,grad_norm,deviation\n");
        for s in &self.steps {
            writeln!(out, "{},{},{},{}", s.step, s.loss, s.grad_norm, s.deviation).expect("writing to a String");
        }
        out
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max_param_deviation <= tol && self.max_state_deviation <= tol
    }
}

fn sup_diff(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    Ok(a.sub(b)?.max_abs())
}

/// Drives both dual loops from the same `Θ₀`, transforms, batches and fresh
/// optimizer state, comparing after every step. `cfg.decay` is replaced by
/// the pairing's modes.
pub fn equivalence_harness(
    mlp: &Mlp,
    source: &dyn BatchSource,
    theta0: &ModelParams,
    cfg: &TrainConfig,
    opts: &HarnessOptions,
) -> Result<EquivalenceReport> {
    let transforms = initial_transforms(mlp, source, cfg, theta0)?;
    let (mode_t, mode_a) = opts.pairing.modes(opts.lambda);
    let mut cfg_t = cfg.clone();
    cfg_t.decay = mode_t;
    let mut cfg_a = cfg.clone();
    cfg_a.decay = mode_a;

    let predicted_step1 = if opts.pairing == DecayPairing::Mismatched {
        let mut worst = 0.0f64;
        let adapters = match &opts.initial_adapter {
            Some(l) => Some(transforms.split(l)?),
            None => None,
        };
        for (l, layer) in theta0.layers.iter().enumerate() {
            let w = match &adapters {
                Some(parts) => layer.weight.sub(&transforms.layers[l].apply_transpose(&parts[l].0)?)?,
                None => layer.weight.clone(),
            };
            worst = worst.max(w.max_abs());
        }
        opts.lambda * worst
    } else {
        0.0
    };

    let set = match &opts.initial_adapter {
        Some(l0) => AdapterSet::with_initial_adapter(theta0, transforms.clone(), l0.clone())?,
        None => AdapterSet::new(theta0.clone(), transforms.clone())?,
    };
    let mut run_t = TransformedRun::with_transforms(mlp, cfg_t, theta0.clone(), transforms, opts.initial_adapter.as_ref())?;
    let mut run_a = AdapterRun::from_set(mlp, cfg_a, set)?;

    let mut steps = Vec::with_capacity(cfg.steps);
    let mut max_param_deviation = 0.0f64;
    let mut max_state_deviation = 0.0f64;
    let mut step1_abs_deviation = 0.0;
    for t in 0..cfg.steps {
        let rec = run_t.step(source)?;
        run_a.step(source)?;
        let theta_a = run_a.set.materialize()?;
        let abs = sup_diff(&run_t.params, &theta_a)?;
        let deviation = abs / (1.0 + run_t.params.max_abs());
        let state_deviation = run_t.state.deviation(&run_a.state);
        if t == 0 {
            step1_abs_deviation = abs;
        }
        max_param_deviation = max_param_deviation.max(deviation);
        max_state_deviation = max_state_deviation.max(state_deviation);
        steps.push(HarnessStep {
            step: t,
            loss: rec.loss,
            grad_norm: rec.grad_norm,
            deviation,
            state_deviation,
        });
    }
    Ok(EquivalenceReport {
        pairing: opts.pairing,
        max_param_deviation,
        max_state_deviation,
        step1_abs_deviation,
        predicted_step1,
        steps,
        final_params_adapter: run_a.set.materialize()?,
        final_params_transformed: run_t.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, LossKind, Nonlinearity, SyntheticTask, TaskKind, TaskSpec};
    use crate::optim::OptimizerKind;
    use crate::rng::Rng;
    use crate::trainer::TransformSpec;
    use crate::transform::TransformFamily;

    fn setup() -> (Mlp, SyntheticTask, ModelParams) {
        let task = SyntheticTask::new(
            5,
            TaskSpec {
                kind: TaskKind::Regression,
                in_dim: 8,
                out_dim: 4,
                teacher_hidden: vec![6],
                batch_size: 8,
                num_batches: None,
                noise: 0.01,
            },
        )
        .unwrap();
        let mlp = Mlp::new(
            vec![
                LayerSpec::new(8, 12, Nonlinearity::Tanh, true),
                LayerSpec::new(12, 4, Nonlinearity::Identity, true),
            ],
            LossKind::Mse,
        )
        .unwrap();
        let params = mlp.init_params(&mut Rng::new(2, 2));
        (mlp, task, params)
    }

    #[test]
    fn sgd_and_adam_runs_agree() {
        let (mlp, task, params) = setup();
        for opt in [OptimizerKind::Sgd { lr: 0.05 }, OptimizerKind::adam(1e-2)] {
            for family in [TransformFamily::Gaussian, TransformFamily::TwoSidedSvd, TransformFamily::DenseGaussian] {
                let mut cfg = TrainConfig::new(40, opt, TransformSpec { family, rank: 2 });
                cfg.merge_every = 15;
                let r = equivalence_harness(&mlp, &task, &params, &cfg, &HarnessOptions::default()).unwrap();
                assert!(r.within(1e-9), "{family:?} {opt:?}: {} {}", r.max_param_deviation, r.max_state_deviation);
            }
        }
    }

    #[test]
    fn identity_transform_is_exact() {
        let (mlp, task, params) = setup();
        let cfg = TrainConfig::new(20, OptimizerKind::adam(1e-2), TransformSpec { family: TransformFamily::Identity, rank: 0 });
        let r = equivalence_harness(&mlp, &task, &params, &cfg, &HarnessOptions::default()).unwrap();
        assert!(r.max_param_deviation <= 1e-12);
    }

    #[test]
    fn decay_pairings() {
        let (mlp, task, params) = setup();
        let cfg = TrainConfig::new(30, OptimizerKind::adam(1e-2), TransformSpec { family: TransformFamily::SemiOrthogonal, rank: 2 });
        for pairing in DecayPairing::ALL {
            let opts = HarnessOptions {
                pairing,
                lambda: 0.1,
                initial_adapter: None,
            };
            let r = equivalence_harness(&mlp, &task, &params, &cfg, &opts).unwrap();
            if pairing.expects_equivalence() {
                assert!(r.within(1e-9), "{pairing:?}: {}", r.max_param_deviation);
            } else {
                assert!((r.step1_abs_deviation - r.predicted_step1).abs() <= 1e-12);
                assert!(r.predicted_step1 > 0.0);
            }
        }
    }

    #[test]
    fn nonzero_initial_adapter() {
        let (mlp, task, params) = setup();
        let mut cfg = TrainConfig::new(30, OptimizerKind::adam(1e-2), TransformSpec { family: TransformFamily::Rademacher, rank: 2 });
        cfg.merge_every = 0;
        let t = initial_transforms(&mlp, &task, &cfg, &params).unwrap();
        let mut rng = Rng::new(8, 8);
        let l0: Vector = (0..t.compressed_dim()).map(|_| 0.2 * rng.normal()).collect::<Vec<_>>().into();
        for pairing in DecayPairing::ALL {
            let opts = HarnessOptions {
                pairing,
                lambda: 0.1,
                initial_adapter: Some(l0.clone()),
            };
            let r = equivalence_harness(&mlp, &task, &params, &cfg, &opts).unwrap();
            if pairing.expects_equivalence() {
                assert!(r.within(1e-9), "{pairing:?}: {}", r.max_param_deviation);
            } else {
                assert!((r.step1_abs_deviation - r.predicted_step1).abs() <= 1e-12);
            }
        }
    }
}
