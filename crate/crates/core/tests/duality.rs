mod common;

use dualtrain::linalg::Vector;
use dualtrain::model::{LossKind, Nonlinearity};
use dualtrain::optim::OptimizerKind;
use dualtrain::rng::Rng;
use dualtrain::trainer::{equivalence_harness, initial_transforms, DecayPairing, HarnessOptions, TrainConfig, TransformSpec};
use dualtrain::transform::TransformFamily;
use proptest::prelude::*;

fn family_strategy() -> impl Strategy<Value = TransformFamily> {
    proptest::sample::select(TransformFamily::ALL.to_vec())
}

fn optimizer_strategy() -> impl Strategy<Value = OptimizerKind> {
    prop_oneof![
        (1e-3f64..2e-2).prop_map(|lr| OptimizerKind::Sgd { lr }),
        (1e-3f64..2e-2, 0.5f64..0.95).prop_map(|(lr, beta)| OptimizerKind::Momentum { lr, beta }),
        (1e-3f64..1e-2).prop_map(OptimizerKind::adam),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Both dual loops stay together for any family, optimizer, merge
    /// schedule, accumulation and matched decay.
    #[test]
    fn dual_runs_agree(
        family in family_strategy(),
        opt in optimizer_strategy(),
        hidden in 3usize..12,
        rank in 1usize..5,
        merge_every in prop_oneof![Just(0usize), 3usize..12],
        accumulation in 1usize..3,
        pairing in proptest::sample::select(vec![DecayPairing::None, DecayPairing::AdapterMatched, DecayPairing::TransformedMatched]),
        seed in 0u64..10_000,
    ) {
        let task = common::regression_task(seed, 6, 4, 16);
        let mlp = common::mlp(&[6, hidden, 4], Nonlinearity::Tanh, true, LossKind::Mse);
        let p = common::init(&mlp, seed);
        let mut cfg = TrainConfig::new(25, opt, TransformSpec { family, rank });
        cfg.merge_every = merge_every;
        cfg.accumulation_microbatches = accumulation;
        cfg.seed = seed;
        let opts = HarnessOptions { pairing, lambda: 0.05, initial_adapter: None };
        let r = equivalence_harness(&mlp, &task, &p, &cfg, &opts).unwrap();
        prop_assert!(r.within(1e-9), "{} {}", r.max_param_deviation, r.max_state_deviation);
    }
}

#[test]
fn mismatched_decay_first_step_gap_is_predicted() {
    let task = common::regression_task(2, 8, 4, 16);
    let mlp = common::mlp(&[8, 16, 4], Nonlinearity::Tanh, true, LossKind::Mse);
    let p = common::init(&mlp, 2);
    for family in [TransformFamily::Gaussian, TransformFamily::SemiOrthogonal, TransformFamily::TwoSidedSvd] {
        let cfg = TrainConfig::new(5, OptimizerKind::adam(1e-2), TransformSpec { family, rank: 2 });
        let opts = HarnessOptions {
            pairing: DecayPairing::Mismatched,
            lambda: 0.1,
            initial_adapter: None,
        };
        let r = equivalence_harness(&mlp, &task, &p, &cfg, &opts).unwrap();
        // oracle: λ times the largest |weight| of Θ₀, since Λ₀ = 0
        let oracle = 0.1 * p.layers.iter().map(|l| l.weight.max_abs()).fold(0.0, f64::max);
        assert!((r.predicted_step1 - oracle).abs() <= 1e-15);
        assert!((r.step1_abs_deviation - oracle).abs() <= 1e-12, "{family:?}: {} vs {oracle}", r.step1_abs_deviation);
    }
}

#[test]
fn nonzero_initial_adapter_keeps_the_views_equivalent() {
    let task = common::regression_task(3, 8, 4, 16);
    let mlp = common::mlp(&[8, 10, 4], Nonlinearity::Tanh, true, LossKind::Mse);
    let p = common::init(&mlp, 3);
    let cfg = TrainConfig::new(30, OptimizerKind::adam(5e-3), TransformSpec { family: TransformFamily::Rademacher, rank: 3 });
    let dim = initial_transforms(&mlp, &task, &cfg, &p).unwrap().compressed_dim();
    let mut rng = Rng::new(3, 9);
    let l0: Vector = (0..dim).map(|_| 0.1 * rng.normal()).collect::<Vec<_>>().into();
    for pairing in [DecayPairing::None, DecayPairing::AdapterMatched, DecayPairing::TransformedMatched] {
        let opts = HarnessOptions {
            pairing,
            lambda: 0.1,
            initial_adapter: Some(l0.clone()),
        };
        let r = equivalence_harness(&mlp, &task, &p, &cfg, &opts).unwrap();
        assert!(r.within(1e-9), "{pairing:?}: {}", r.max_param_deviation);
    }
}
