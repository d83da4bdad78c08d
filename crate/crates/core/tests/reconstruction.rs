mod common;

use common::squared_singular_values;
use dualtrain::analysis::reconstruction_error;
use dualtrain::linalg::Matrix;
use dualtrain::model::{LossKind, Nonlinearity};
use dualtrain::rng::{Rng, StreamId};
use dualtrain::transform::{two_sided_ranks, TransformFamily};

fn test_gradients() -> Vec<Matrix> {
    let mut rng = Rng::new(5, 5);
    let mut out = vec![
        common::random_matrix(&mut rng, 12, 20),
        common::random_matrix(&mut rng, 20, 12),
        common::low_rank_plus_noise(&mut rng, 16, 16, 3, 0.05),
        common::low_rank_plus_noise(&mut rng, 8, 30, 2, 0.01),
        common::low_rank_plus_noise(&mut rng, 30, 9, 5, 0.2),
    ];
    // real weight gradients from a small network
    let task = common::regression_task(3, 10, 6, 32);
    let mlp = common::mlp(&[10, 14, 6], Nonlinearity::Tanh, true, LossKind::Mse);
    let p = common::init(&mlp, 3);
    let (_, g) = mlp.loss_and_grad(&p, &task.batch(0, 0)).unwrap();
    out.extend(g.layers.into_iter().map(|l| l.weight));
    out
}

#[test]
fn svd_error_equals_tail_energy() {
    for g in test_gradients() {
        let sv2 = squared_singular_values(&g);
        let (m, n) = g.shape();
        for d in 1..=m.min(n) {
            let t = TransformFamily::Svd.build(d, m, n, StreamId { seed: 0, stream: 0 }, Some(&g)).unwrap();
            let (err, _) = reconstruction_error(&t, &g).unwrap();
            let tail: f64 = sv2[d..].iter().sum();
            assert!((err - tail).abs() <= 1e-8, "{m}x{n} d={d}: {err} vs {tail}");
        }
    }
}

#[test]
fn two_sided_svd_error_equals_tail_beyond_the_smaller_side_rank() {
    for g in test_gradients() {
        let sv2 = squared_singular_values(&g);
        let (m, n) = g.shape();
        for d in 1..=3 {
            let t = TransformFamily::TwoSidedSvd.build(d, m, n, StreamId { seed: 0, stream: 0 }, Some(&g)).unwrap();
            let (dl, dr) = two_sided_ranks(d.min(m.min(n)), m, n);
            let (err, _) = reconstruction_error(&t, &g).unwrap();
            let tail: f64 = sv2[dl.min(dr)..].iter().sum();
            assert!((err - tail).abs() <= 1e-8, "{m}x{n} d={d}: {err} vs {tail}");
        }
    }
}

/// Any rank-`d` reconstruction is beaten by the truncated SVD.
#[test]
fn svd_beats_every_random_projector_at_equal_rank() {
    let randoms = [TransformFamily::SemiOrthogonal, TransformFamily::Gaussian, TransformFamily::Rademacher];
    for (gi, g) in test_gradients().into_iter().enumerate() {
        let (m, n) = g.shape();
        for d in [1, 2, 4] {
            let d = d.min(m.min(n));
            let svd = TransformFamily::Svd.build(d, m, n, StreamId { seed: 0, stream: 0 }, Some(&g)).unwrap();
            let (best, _) = reconstruction_error(&svd, &g).unwrap();
            for family in randoms {
                for s in 0..20 {
                    let t = family.build(d, m, n, StreamId { seed: s, stream: gi as u64 }, None).unwrap();
                    let (err, _) = reconstruction_error(&t, &g).unwrap();
                    assert!(best <= err + 1e-10, "{family:?} {m}x{n} d={d}: svd {best} > {err}");
                }
            }
        }
    }
}

#[test]
fn full_rank_orthonormal_projector_reconstructs_exactly() {
    let g = common::random_matrix(&mut Rng::new(1, 1), 6, 9);
    for family in [TransformFamily::SemiOrthogonal, TransformFamily::Svd] {
        let t = family.build(6, 6, 9, StreamId { seed: 1, stream: 1 }, Some(&g)).unwrap();
        let (err, cos) = reconstruction_error(&t, &g).unwrap();
        assert!(err <= 1e-20 * g.frobenius_sq().max(1.0) + 1e-18, "{family:?}: {err}");
        assert!((cos - 1.0).abs() <= 1e-12);
    }
}
