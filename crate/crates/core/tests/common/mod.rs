//! Independent oracles and fixtures shared by the integration tests.
//!
//! Nothing here calls the library's linear algebra: the oracles work on
//! plain nested `Vec`s so a bug in `Matrix` cannot hide itself.

#![allow(dead_code)]

use dualtrain::linalg::Matrix;
use dualtrain::model::{LayerSpec, LossKind, Mlp, ModelParams, Nonlinearity, SyntheticTask, TaskKind, TaskSpec};
use dualtrain::rng::Rng;

pub type Dense = Vec<Vec<f64>>;

pub fn to_dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|i| (0..m.cols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Column-major flattening.
pub fn vec_of(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for j in 0..m.cols() {
        for i in 0..m.rows() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn mat_vec(a: &Dense, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn transpose(a: &Dense) -> Dense {
    if a.is_empty() {
        return Vec::new();
    }
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn mat_mul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = if inner == 0 { 0 } else { b[0].len() };
    a.iter()
        .map(|row| (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect())
        .collect()
}

/// `Rᵀ ⊗ L` written out entry by entry, for `L: d_L x m`, `R: n x d_R`,
/// acting on column-major `vec(G)`.
pub fn dense_kron(left: &Matrix, right: &Matrix) -> Dense {
    let (dl, m) = left.shape();
    let (n, dr) = right.shape();
    let mut out = vec![vec![0.0; m * n]; dl * dr];
    for j in 0..dr {
        for i in 0..dl {
            for q in 0..n {
                for p in 0..m {
                    out[j * dl + i][q * m + p] = right[(q, j)] * left[(i, p)];
                }
            }
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn sym_eigenvalues(mut a: Dense) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

/// Squared singular values of `g`, descending, from the eigenvalues of the
/// smaller Gram matrix.
pub fn squared_singular_values(g: &Matrix) -> Vec<f64> {
    let d = to_dense(g);
    let gram = if g.rows() <= g.cols() {
        mat_mul(&d, &transpose(&d))
    } else {
        mat_mul(&transpose(&d), &d)
    };
    sym_eigenvalues(gram).into_iter().map(|x| x.max(0.0)).collect()
}

/// Standard normal CDF by composite Simpson integration of the density.
pub fn normal_cdf(x: f64) -> f64 {
    let n = 20_000;
    let h = x.abs() / n as f64;
    let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = phi(0.0) + phi(x.abs());
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * phi(i as f64 * h);
    }
    let half = s * h / 3.0;
    if x >= 0.0 {
        0.5 + half
    } else {
        0.5 - half
    }
}

/// Inverse of [`normal_cdf`] by bisection.
pub fn normal_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Rank-`k` signal plus small isotropic noise.
pub fn low_rank_plus_noise(rng: &mut Rng, rows: usize, cols: usize, k: usize, noise: f64) -> Matrix {
    let a = random_matrix(rng, rows, k);
    let b = random_matrix(rng, k, cols);
    let mut g = a.matmul(&b).unwrap();
    for x in g.as_mut_slice() {
        *x += noise * rng.normal();
    }
    g
}

pub fn regression_task(seed: u64, in_dim: usize, out_dim: usize, batch: usize) -> SyntheticTask {
    SyntheticTask::new(
        seed,
        TaskSpec {
            kind: TaskKind::Regression,
            in_dim,
            out_dim,
            teacher_hidden: vec![in_dim.max(out_dim)],
            batch_size: batch,
            num_batches: None,
            noise: 0.01,
        },
    )
    .unwrap()
}

/// MLP with the given widths (input first), `nl` hidden activations and a
/// linear output layer.
pub fn mlp(widths: &[usize], nl: Nonlinearity, bias: bool, loss: LossKind) -> Mlp {
    let last = widths.len() - 2;
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(l, w)| LayerSpec::new(w[0], w[1], if l == last { Nonlinearity::Identity } else { nl }, bias))
        .collect();
    Mlp::new(layers, loss).unwrap()
}

pub fn init(mlp: &Mlp, seed: u64) -> ModelParams {
    mlp.init_params(&mut Rng::new(seed, 0xF1))
}
