mod common;

use common::{dense_kron, mat_vec, sym_eigenvalues, to_dense, transpose, vec_of};
use dualtrain::dist::{init_projectors, InitScheme};
use dualtrain::linalg::Matrix;
use dualtrain::rng::{Rng, StreamId};
use dualtrain::transform::{
    make_gaussian, make_rademacher, make_semi_orthogonal, GradientTransform, Provenance, TransformFamily,
};
use proptest::prelude::*;

#[test]
fn kronecker_apply_matches_dense_oracle_on_100_shapes() {
    let mut rng = Rng::new(11, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = 1 + rng.below(16);
        let n = 1 + rng.below(24);
        let dl = 1 + rng.below(m);
        let dr = 1 + rng.below(n);
        let left = common::random_matrix(&mut rng, dl, m);
        let right = common::random_matrix(&mut rng, n, dr);
        let g = common::random_matrix(&mut rng, m, n);
        let c = common::random_matrix(&mut rng, dl, dr);
        let s = dense_kron(&left, &right);
        let t = GradientTransform::kronecker(left, right, Provenance::Fixed);

        let want = mat_vec(&s, &vec_of(&g));
        let got = vec_of(&t.apply(&g).unwrap());
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs() / (1.0 + b.abs()));
        }

        let want_t = mat_vec(&transpose(&s), &vec_of(&c));
        let got_t = vec_of(&t.apply_transpose(&c).unwrap());
        for (a, b) in got_t.iter().zip(&want_t) {
            worst = worst.max((a - b).abs() / (1.0 + b.abs()));
        }
    }
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn dense_matrix_of_every_family_matches_its_action() {
    let mut rng = Rng::new(3, 3);
    for family in TransformFamily::ALL {
        for (m, n) in [(6, 9), (9, 6), (5, 5)] {
            let g = common::random_matrix(&mut rng, m, n);
            let id = StreamId { seed: 5, stream: 1 };
            let t = family.build(2, m, n, id, Some(&g)).unwrap();
            let s = to_dense(&t.dense_matrix());
            let want = mat_vec(&s, &vec_of(&g));
            let got = vec_of(&t.apply(&g).unwrap());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{family:?} {m}x{n}");
            }
        }
    }
}

fn mean_gram(samples: usize, d: usize, make: impl Fn(&mut Rng) -> Matrix) -> Matrix {
    let mut acc = Matrix::zeros(d, d);
    for s in 0..samples {
        let p = make(&mut Rng::new(42, s as u64));
        acc.add_assign(&p.matmul_t(&p).unwrap()).unwrap();
    }
    acc.scale(1.0 / samples as f64)
}

#[test]
fn random_sketches_are_isotropic_in_expectation() {
    let (d, m) = (4, 32);
    for (name, make) in [
        ("gaussian", make_gaussian as fn(&mut Rng, usize, usize) -> dualtrain::Result<Matrix>),
        ("rademacher", make_rademacher),
    ] {
        let mean = mean_gram(2000, d, |r| make(r, d, m).unwrap());
        let err = mean.sub(&Matrix::identity(d)).unwrap().max_abs();
        assert!(err <= 0.05, "{name}: {err}");
    }
}

#[test]
fn semi_orthogonal_rows_are_orthonormal() {
    for (d, m) in [(1, 1), (4, 32), (7, 7), (3, 50)] {
        for s in 0..20 {
            let p = make_semi_orthogonal(&mut Rng::new(s, 8), d, m).unwrap();
            let err = p.matmul_t(&p).unwrap().sub(&Matrix::identity(d)).unwrap().max_abs();
            assert!(err <= 1e-10, "{d}x{m}: {err}");
        }
    }
}

fn stacked_rank(ps: &[Matrix]) -> usize {
    let stacked = Matrix::vstack(ps).unwrap();
    let s = to_dense(&stacked);
    let gram = common::mat_mul(&s, &transpose(&s));
    sym_eigenvalues(gram).iter().filter(|&&x| x > 1e-8).count()
}

#[test]
fn distributed_projectors_are_mutually_orthogonal_and_cover_kd() {
    for (k, d, m) in [(2, 2, 8), (4, 4, 32), (3, 5, 16), (8, 1, 8)] {
        let ps = init_projectors(InitScheme::Distributed, 9, 0, 3, k, d, m).unwrap();
        for i in 0..k {
            for j in 0..k {
                let cross = ps[i].matmul_t(&ps[j]).unwrap();
                let want = if i == j { Matrix::identity(d) } else { Matrix::zeros(d, d) };
                let err = cross.sub(&want).unwrap().max_abs();
                assert!(err <= 1e-12, "K={k} d={d} m={m} ({i},{j}): {err}");
            }
        }
        assert_eq!(stacked_rank(&ps), k * d);

        let same = init_projectors(InitScheme::Identical, 9, 0, 3, k, d, m).unwrap();
        assert_eq!(stacked_rank(&same), d);
    }
    assert!(init_projectors(InitScheme::Distributed, 9, 0, 0, 5, 4, 16).is_err());
}

#[test]
fn rematerialized_transforms_are_bitwise_identical() {
    let id = StreamId { seed: 77, stream: 3 };
    for family in TransformFamily::ALL {
        if family.needs_gradient() || family == TransformFamily::Identity {
            continue;
        }
        let t = family.build(3, 8, 12, id, None).unwrap();
        assert_eq!(t.rematerialize().unwrap(), t, "{family:?}");
    }
}

fn family_strategy() -> impl Strategy<Value = TransformFamily> {
    proptest::sample::select(TransformFamily::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// `⟨S g, c⟩ = ⟨g, Sᵀ c⟩`.
    #[test]
    fn apply_transpose_is_the_adjoint(
        family in family_strategy(),
        m in 1usize..10,
        n in 1usize..10,
        rank in 1usize..6,
        seed in 0u64..500,
    ) {
        let mut rng = Rng::new(seed, 1);
        let g = common::random_matrix(&mut rng, m, n);
        let t = family.build(rank, m, n, StreamId { seed, stream: 2 }, Some(&g)).unwrap();
        let (cr, cc) = t.compressed_shape();
        let c = common::random_matrix(&mut rng, cr, cc);
        let lhs = t.apply(&g).unwrap().dot(&c).unwrap();
        let rhs = g.dot(&t.apply_transpose(&c).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    /// Orthonormal-row projectors give an idempotent `SᵀS`.
    #[test]
    fn orthonormal_projections_are_idempotent(
        family in proptest::sample::select(vec![TransformFamily::SemiOrthogonal, TransformFamily::Svd, TransformFamily::TwoSidedSvd]),
        m in 1usize..10,
        n in 1usize..10,
        rank in 1usize..6,
        seed in 0u64..500,
    ) {
        let mut rng = Rng::new(seed, 4);
        let g = common::random_matrix(&mut rng, m, n);
        let t = family.build(rank, m, n, StreamId { seed, stream: 5 }, Some(&g)).unwrap();
        let once = t.project(&g).unwrap();
        let twice = t.project(&once).unwrap();
        prop_assert!(once.sub(&twice).unwrap().max_abs() <= 1e-10 * (1.0 + g.max_abs()));
        prop_assert!(once.frobenius_sq() <= g.frobenius_sq() * (1.0 + 1e-12));
    }
}
