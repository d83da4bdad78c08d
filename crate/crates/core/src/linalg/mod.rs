//! Dense column-major linear algebra used throughout the crate.

mod decomp;
mod matrix;

pub use decomp::{
    jacobi_svd, numerical_rank, random_orthogonal, singular_values, svd_top_right, svd_top_rows, Svd,
    JACOBI_MAX_SWEEPS, JACOBI_TOL,
};
pub use matrix::{unvec, vec, Matrix, Vector};
