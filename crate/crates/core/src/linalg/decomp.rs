//! One-sided Jacobi SVD and Gram-Schmidt orthonormalization.

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::Matrix;

/// Off-diagonal convergence threshold for the Jacobi sweeps, per unit of
/// column length. Looser values leave singular vectors inside a cluster of
/// close singular values visibly rotated, which a coordinatewise optimizer
/// then sees.
pub const JACOBI_TOL: f64 = f64::EPSILON;
/// Sweep cap; desk-scale matrices converge in well under this.
pub const JACOBI_MAX_SWEEPS: usize = 60;

/// Thin result of a one-sided Jacobi SVD of an `m x n` matrix.
///
/// `v` is always a complete `n x n` orthogonal matrix. Column `j` of `u` is
/// only meaningful when `singular_values[j] > 0`; otherwise it is zero.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
    pub sweeps: usize,
}

/// Hestenes one-sided Jacobi: rotates column pairs of `a` until they are
/// mutually orthogonal, accumulating the rotations in `v`. Singular values
/// come out sorted nonincreasing, and every singular vector is sign-fixed so
/// its largest-magnitude entry is nonnegative.
pub fn jacobi_svd(a: &Matrix) -> Svd {
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = Matrix::identity(n);
    let mut sweeps = 0;
    let tol = JACOBI_TOL * (m.max(1) as f64);
    // pairs below this scale are roundoff left in numerically null columns
    let floor = f64::EPSILON * f64::EPSILON * a.as_slice().iter().map(|x| x * x).sum::<f64>();

    while sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = col_products(&w, p, q);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let scale = (alpha * beta).sqrt();
                if gamma.abs() <= tol * scale || scale <= floor {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_cols(&mut w, p, q, c, s);
                rotate_cols(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| w.col(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    let mut singular_values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        singular_values.push(sigma);
        let mut vcol = v.col(src).to_vec();
        let flip = sign_fix(&mut vcol);
        v_sorted.col_mut(dst).copy_from_slice(&vcol);
        if sigma > 0.0 {
            let ucol = u.col_mut(dst);
            for (o, x) in ucol.iter_mut().zip(w.col(src)) {
                *o = flip * x / sigma;
            }
        }
    }

    Svd {
        u,
        singular_values,
        v: v_sorted,
        sweeps,
    }
}

fn col_products(w: &Matrix, p: usize, q: usize) -> (f64, f64, f64) {
    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
    for (x, y) in w.col(p).iter().zip(w.col(q)) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

fn rotate_cols(w: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let rows = w.rows();
    let data = w.as_mut_slice();
    for i in 0..rows {
        let x = data[p * rows + i];
        let y = data[q * rows + i];
        data[p * rows + i] = c * x - s * y;
        data[q * rows + i] = s * x + c * y;
    }
}

/// Negates `v` if needed so its largest-magnitude entry is nonnegative.
/// Returns the factor applied.
fn sign_fix(v: &mut [f64]) -> f64 {
    let mut best = 0.0f64;
    let mut best_abs = -1.0f64;
    for &x in v.iter() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = x;
        }
    }
    if best < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
        -1.0
    } else {
        1.0
    }
}

/// Singular values of `g`, nonincreasing.
pub fn singular_values(g: &Matrix) -> Vec<f64> {
    let svd = if g.rows() >= g.cols() {
        jacobi_svd(g)
    } else {
        jacobi_svd(&g.transpose())
    };
    svd.singular_values
}

/// Number of singular values above `rel_tol` times the largest.
pub fn numerical_rank(g: &Matrix, rel_tol: f64) -> usize {
    let s = singular_values(g);
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > rel_tol * top).count()
}

/// Transpose of the top-`d` left singular vectors of `g`: a `d x rows(g)`
/// matrix with orthonormal rows, ordered by nonincreasing singular value.
/// `d` may exceed the rank; the extra rows then span part of the null space.
pub fn svd_top_rows(g: &Matrix, d: usize) -> Result<Matrix> {
    let max = g.rows();
    if d == 0 || d > max {
        return Err(Error::Rank {
            what: "svd_top_rows",
            rank: d,
            max,
        });
    }
    // Right singular vectors of gᵀ are the left singular vectors of g, and
    // the Jacobi V factor is complete even when g is rank deficient.
    let svd = jacobi_svd(&g.transpose());
    Ok(svd.v.left_cols(d).transpose())
}

/// Top-`d` right singular vectors of `g` as the columns of a `cols(g) x d`
/// matrix. `d` may be as large as `cols(g)`.
pub fn svd_top_right(g: &Matrix, d: usize) -> Result<Matrix> {
    let max = g.cols();
    if d == 0 || d > max {
        return Err(Error::Rank {
            what: "svd_top_right",
            rank: d,
            max,
        });
    }
    let svd = jacobi_svd(g);
    Ok(svd.v.left_cols(d))
}

/// Orthonormalizes the columns of a square matrix with twice-iterated
/// modified Gram-Schmidt. The implied `R` has a positive diagonal, which
/// fixes the column signs.
fn orthonormalize_columns(a: &Matrix) -> Matrix {
    let (m, n) = a.shape();
    let mut q = a.clone();
    for j in 0..n {
        for _pass in 0..2 {
            for k in 0..j {
                let proj: f64 = q.col(k).iter().zip(q.col(j)).map(|(x, y)| x * y).sum();
                let qk = q.col(k).to_vec();
                for (x, y) in q.col_mut(j).iter_mut().zip(&qk) {
                    *x -= proj * y;
                }
            }
        }
        let norm = q.col(j).iter().map(|x| x * x).sum::<f64>().sqrt();
        debug_assert!(norm > 0.0, "Gaussian sample is singular with probability zero");
        for x in q.col_mut(j) {
            *x /= norm;
        }
    }
    debug_assert_eq!(m, q.rows());
    q
}

/// Random `m x m` orthogonal matrix: a standard Gaussian square matrix,
/// orthonormalized with the QR sign convention `diag(R) > 0`.
pub fn random_orthogonal(rng: &mut Rng, m: usize) -> Matrix {
    let g = Matrix::from_fn(m, m, |_, _| rng.normal());
    orthonormalize_columns(&g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.normal())
    }

    #[test]
    fn diagonal_svd_picks_leading_axes() {
        let g = Matrix::diag(&[3.0, 2.0, 1.0]);
        let p = svd_top_rows(&g, 2).unwrap();
        assert_eq!(p.shape(), (2, 3));
        assert!((p[(0, 0)].abs() - 1.0).abs() < 1e-14);
        assert!((p[(1, 1)].abs() - 1.0).abs() < 1e-14);
        assert!(p[(0, 2)].abs() < 1e-14 && p[(1, 2)].abs() < 1e-14);
    }

    #[test]
    fn top_rows_are_orthonormal() {
        let mut rng = Rng::new(3, 0);
        let g = random(&mut rng, 8, 12);
        let p = svd_top_rows(&g, 5).unwrap();
        let ppt = p.matmul_t(&p).unwrap();
        assert!(ppt.sub(&Matrix::identity(5)).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn full_rank_projector_reconstructs() {
        let mut rng = Rng::new(4, 0);
        for &(m, n) in &[(6, 9), (9, 6), (5, 5)] {
            let g = random(&mut rng, m, n);
            let p = svd_top_rows(&g, m.min(n)).unwrap();
            let rec = p.t_matmul(&p.matmul(&g).unwrap()).unwrap();
            assert!(g.sub(&rec).unwrap().frobenius() <= 1e-8 * g.frobenius());
        }
    }

    #[test]
    fn singular_values_nonincreasing_and_svd_reconstructs() {
        let mut rng = Rng::new(5, 0);
        let g = random(&mut rng, 7, 4);
        let svd = jacobi_svd(&g);
        for w in svd.singular_values.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let us = Matrix::from_fn(7, 4, |i, j| svd.u[(i, j)] * svd.singular_values[j]);
        let rec = us.matmul_t(&svd.v).unwrap();
        assert!(rec.sub(&g).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn sign_convention_makes_largest_entry_nonnegative() {
        let mut rng = Rng::new(6, 0);
        let g = random(&mut rng, 5, 5);
        let p = svd_top_rows(&g, 5).unwrap();
        for i in 0..5 {
            let row = p.row(i);
            let big = row.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(big >= 0.0);
        }
    }

    #[test]
    fn rank_out_of_range() {
        let g = Matrix::zeros(3, 4);
        assert!(svd_top_rows(&g, 4).is_err());
        assert!(svd_top_rows(&g, 0).is_err());
        assert!(svd_top_right(&g, 5).is_err());
        assert!(svd_top_right(&g, 4).is_ok());
    }

    #[test]
    fn random_orthogonal_properties() {
        let mut rng = Rng::new(11, 0);
        let q1 = random_orthogonal(&mut rng, 1);
        assert_eq!(q1[(0, 0)].abs(), 1.0);

        let mut rng = Rng::new(12, 0);
        let q = random_orthogonal(&mut rng, 16);
        let qtq = q.t_matmul(&q).unwrap();
        assert!(qtq.sub(&Matrix::identity(16)).unwrap().max_abs() < 1e-10);
        for i in 0..16 {
            let norm: f64 = q.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }

        let again = random_orthogonal(&mut Rng::new(12, 0), 16);
        assert_eq!(q.as_slice(), again.as_slice());
    }
}
