//! Linear gradient transformations `S` and the sketch families used to build
//! them.
//!
//! A transform acts on one weight matrix `G` (`m x n`). Its compressed image
//! lives in a smaller matrix space, and [`GradientTransform::apply_transpose`]
//! maps back. Whole-model transforms are block diagonal: see
//! [`TransformAssignment`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{random_orthogonal, svd_top_right, svd_top_rows, unvec, Matrix, Vector};
use crate::model::{LayerSpec, ModelParams};
use crate::rng::{stream_id, Rng, StreamId};

const TRANSFORM_TAG: u64 = 0x7A4F;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    /// `S` is `r x (m n)`; the compressed image is an `r x 1` matrix.
    Dense { s: Matrix },
    /// `S = Rᵀ ⊗ L` with `L: d_L x m` and `R: n x d_R`.
    Kronecker { left: Matrix, right: Matrix },
    /// `P: d x m`, compressed image `P G`.
    LeftOnly { p: Matrix },
    /// `P: n x d`, compressed image `G P`.
    RightOnly { p: Matrix },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Fixed,
    Svd,
    Gaussian(StreamId),
    Rademacher(StreamId),
    SemiOrthogonal(StreamId),
}

impl Provenance {
    pub fn stream(&self) -> Option<StreamId> {
        match *self {
            Provenance::Gaussian(id) | Provenance::Rademacher(id) | Provenance::SemiOrthogonal(id) => Some(id),
            Provenance::Fixed | Provenance::Svd => None,
        }
    }
}

/// The constructor families, as named in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformFamily {
    Identity,
    DenseGaussian,
    Gaussian,
    Rademacher,
    SemiOrthogonal,
    Svd,
    TwoSidedGaussian,
    TwoSidedSvd,
    /// Gaussian Kronecker factors with unequal side ranks `(d, 2d)`.
    Kronecker,
}

impl TransformFamily {
    pub const ALL: [TransformFamily; 9] = [
        TransformFamily::Identity,
        TransformFamily::DenseGaussian,
        TransformFamily::Gaussian,
        TransformFamily::Rademacher,
        TransformFamily::SemiOrthogonal,
        TransformFamily::Svd,
        TransformFamily::TwoSidedGaussian,
        TransformFamily::TwoSidedSvd,
        TransformFamily::Kronecker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformFamily::Identity => "identity",
            TransformFamily::DenseGaussian => "dense_gaussian",
            TransformFamily::Gaussian => "gaussian",
            TransformFamily::Rademacher => "rademacher",
            TransformFamily::SemiOrthogonal => "semi_orthogonal",
            TransformFamily::Svd => "svd",
            TransformFamily::TwoSidedGaussian => "two_sided_gaussian",
            TransformFamily::TwoSidedSvd => "two_sided_svd",
            TransformFamily::Kronecker => "kronecker",
        }
    }

    pub fn needs_gradient(self) -> bool {
        matches!(self, TransformFamily::Svd | TransformFamily::TwoSidedSvd)
    }

    /// Builds the transform for one `rows x cols` weight. `rank` is the
    /// one-sided rank `d`; other families derive their sizes from it so that
    /// trainable counts stay comparable. Gradient-based families need `grad`.
    pub fn build(
        self,
        rank: usize,
        rows: usize,
        cols: usize,
        id: StreamId,
        grad: Option<&Matrix>,
    ) -> Result<GradientTransform> {
        if rank == 0 && self != TransformFamily::Identity {
            return Err(Error::Rank {
                what: "transform rank",
                rank,
                max: rows.min(cols),
            });
        }
        let d = rank.min(rows.min(cols));
        let mut rng = Rng::from_id(id);
        let side = Side::for_shape(rows, cols);
        let grad = || -> Result<&Matrix> {
            let g = grad.ok_or_else(|| Error::Config(format!("{} transform needs a gradient", self.name())))?;
            if g.shape() != (rows, cols) {
                return Err(Error::shape("build transform", format!("{rows}x{cols}"), format!("{:?}", g.shape())));
            }
            Ok(g)
        };
        let mut t = match self {
            TransformFamily::Identity => GradientTransform::identity(rows, cols),
            TransformFamily::DenseGaussian => {
                let r = (d * rows.max(cols)).min(rows * cols);
                make_dense_gaussian(&mut rng, r, rows, cols)?
            }
            TransformFamily::Gaussian => {
                let q = make_gaussian(&mut rng, d, side.dim(rows, cols))?;
                GradientTransform::one_sided(q, rows, cols, Provenance::Gaussian(id))?
            }
            TransformFamily::Rademacher => {
                let q = make_rademacher(&mut rng, d, side.dim(rows, cols))?;
                GradientTransform::one_sided(q, rows, cols, Provenance::Rademacher(id))?
            }
            TransformFamily::SemiOrthogonal => {
                let q = make_semi_orthogonal(&mut rng, d, side.dim(rows, cols))?;
                GradientTransform::one_sided(q, rows, cols, Provenance::SemiOrthogonal(id))?
            }
            TransformFamily::Svd => make_svd_projector(grad()?, d)?,
            TransformFamily::TwoSidedGaussian => {
                let (dl, dr) = two_sided_ranks(d, rows, cols);
                make_two_sided_gaussian(&mut rng, dl, dr, rows, cols)?
            }
            TransformFamily::TwoSidedSvd => {
                let (dl, dr) = two_sided_ranks(d, rows, cols);
                make_two_sided_svd(grad()?, dl, dr)?
            }
            TransformFamily::Kronecker => {
                make_two_sided_gaussian(&mut rng, rank.min(rows), (2 * rank).min(cols), rows, cols)?
            }
        };
        if matches!(
            self,
            TransformFamily::DenseGaussian | TransformFamily::TwoSidedGaussian | TransformFamily::Kronecker
        ) {
            t.provenance = Provenance::Gaussian(id);
            t.persisted = false;
        }
        t.family = self;
        t.rank = rank;
        Ok(t)
    }
}

/// Which side of `G` a one-sided transform multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    /// Left when `rows <= cols`, so the projected dimension is the smaller one.
    pub fn for_shape(rows: usize, cols: usize) -> Side {
        if rows <= cols {
            Side::Left
        } else {
            Side::Right
        }
    }

    /// Length of the side being compressed.
    pub fn dim(self, rows: usize, cols: usize) -> usize {
        match self {
            Side::Left => rows,
            Side::Right => cols,
        }
    }
}

/// Square rank `r` for two-sided transforms: the largest `r` with
/// `r² <= d · max(m, n)`, the trainable count of the one-sided adapter at
/// rank `d`. Both sides are capped at `min(m, n)`: beyond that the gradient
/// has no more singular directions and an SVD factor would be arbitrary.
pub fn two_sided_ranks(d: usize, rows: usize, cols: usize) -> (usize, usize) {
    let budget = d * rows.max(cols);
    let mut r = (budget as f64).sqrt() as usize;
    while r * r > budget {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= budget {
        r += 1;
    }
    let r = r.max(1).min(rows.min(cols));
    (r, r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientTransform {
    pub kind: TransformKind,
    rows: usize,
    cols: usize,
    pub provenance: Provenance,
    /// Whether the matrices must be stored rather than rematerialized.
    pub persisted: bool,
    pub family: TransformFamily,
    /// Rank requested from the family constructor.
    pub rank: usize,
}

impl GradientTransform {
    pub fn identity(rows: usize, cols: usize) -> Self {
        GradientTransform {
            kind: TransformKind::Identity,
            rows,
            cols,
            provenance: Provenance::Fixed,
            persisted: false,
            family: TransformFamily::Identity,
            rank: 0,
        }
    }

    pub fn dense(s: Matrix, rows: usize, cols: usize, provenance: Provenance) -> Result<Self> {
        if s.cols() != rows * cols {
            return Err(Error::shape("dense transform", rows * cols, s.cols()));
        }
        Ok(GradientTransform {
            persisted: default_persisted(&provenance),
            kind: TransformKind::Dense { s },
            rows,
            cols,
            provenance,
            family: TransformFamily::DenseGaussian,
            rank: 0,
        })
    }

    pub fn kronecker(left: Matrix, right: Matrix, provenance: Provenance) -> Self {
        GradientTransform {
            rows: left.cols(),
            cols: right.rows(),
            persisted: default_persisted(&provenance),
            kind: TransformKind::Kronecker { left, right },
            provenance,
            family: TransformFamily::TwoSidedGaussian,
            rank: 0,
        }
    }

    /// `P: d x rows`, acting as `P G` on `rows x cols` gradients.
    pub fn left_only(p: Matrix, cols: usize, provenance: Provenance) -> Self {
        GradientTransform {
            rows: p.cols(),
            cols,
            persisted: default_persisted(&provenance),
            kind: TransformKind::LeftOnly { p },
            provenance,
            family: family_of(&provenance),
            rank: 0,
        }
    }

    /// `P: cols x d`, acting as `G P` on `rows x cols` gradients.
    pub fn right_only(p: Matrix, rows: usize, provenance: Provenance) -> Self {
        GradientTransform {
            rows,
            cols: p.rows(),
            persisted: default_persisted(&provenance),
            kind: TransformKind::RightOnly { p },
            provenance,
            family: family_of(&provenance),
            rank: 0,
        }
    }

    /// Places a `d x k` sketch on the side chosen by [`Side::for_shape`]:
    /// `LeftOnly(q)` when `k = rows`, `RightOnly(qᵀ)` when `k = cols`.
    pub fn one_sided(q: Matrix, rows: usize, cols: usize, provenance: Provenance) -> Result<Self> {
        let side = Side::for_shape(rows, cols);
        let k = side.dim(rows, cols);
        if q.cols() != k {
            return Err(Error::shape("one-sided sketch", k, q.cols()));
        }
        Ok(match side {
            Side::Left => GradientTransform::left_only(q, cols, provenance),
            Side::Right => GradientTransform::right_only(q.transpose(), rows, provenance),
        })
    }

    pub fn param_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn compressed_shape(&self) -> (usize, usize) {
        match &self.kind {
            TransformKind::Identity => (self.rows, self.cols),
            TransformKind::Dense { s } => (s.rows(), 1),
            TransformKind::Kronecker { left, right } => (left.rows(), right.cols()),
            TransformKind::LeftOnly { p } => (p.rows(), self.cols),
            TransformKind::RightOnly { p } => (self.rows, p.cols()),
        }
    }

    /// Dimension of the compressed space, `r`.
    pub fn compressed_len(&self) -> usize {
        let (a, b) = self.compressed_shape();
        a * b
    }

    /// Number of matrix entries the transform holds.
    pub fn stored_elements(&self) -> usize {
        match &self.kind {
            TransformKind::Identity => 0,
            TransformKind::Dense { s } => s.len(),
            TransformKind::Kronecker { left, right } => left.len() + right.len(),
            TransformKind::LeftOnly { p } | TransformKind::RightOnly { p } => p.len(),
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self.kind {
            TransformKind::Identity => "identity",
            TransformKind::Dense { .. } => "dense",
            TransformKind::Kronecker { .. } => "kronecker",
            TransformKind::LeftOnly { .. } => "left_only",
            TransformKind::RightOnly { .. } => "right_only",
        }
    }

    /// `S G`, as a matrix of [`Self::compressed_shape`].
    pub fn apply(&self, g: &Matrix) -> Result<Matrix> {
        if g.shape() != self.param_shape() {
            return Err(Error::shape("transform apply", fmt_shape(self.param_shape()), fmt_shape(g.shape())));
        }
        match &self.kind {
            TransformKind::Identity => Ok(g.clone()),
            TransformKind::Dense { s } => {
                let col = Matrix::from_col_major(g.len(), 1, g.as_slice().to_vec())?;
                s.matmul(&col)
            }
            TransformKind::Kronecker { left, right } => left.matmul(g)?.matmul(right),
            TransformKind::LeftOnly { p } => p.matmul(g),
            TransformKind::RightOnly { p } => g.matmul(p),
        }
    }

    /// `Sᵀ C`, back in the parameter shape.
    pub fn apply_transpose(&self, c: &Matrix) -> Result<Matrix> {
        if c.shape() != self.compressed_shape() {
            return Err(Error::shape(
                "transform apply_transpose",
                fmt_shape(self.compressed_shape()),
                fmt_shape(c.shape()),
            ));
        }
        match &self.kind {
            TransformKind::Identity => Ok(c.clone()),
            TransformKind::Dense { s } => {
                let back = s.t_matmul(c)?;
                unvec(back.as_slice(), self.rows, self.cols)
            }
            TransformKind::Kronecker { left, right } => left.t_matmul(c)?.matmul_t(right),
            TransformKind::LeftOnly { p } => p.t_matmul(c),
            TransformKind::RightOnly { p } => c.matmul_t(p),
        }
    }

    /// `Sᵀ S G`.
    pub fn project(&self, g: &Matrix) -> Result<Matrix> {
        self.apply_transpose(&self.apply(g)?)
    }

    /// Explicit `S` as an `r x (m n)` matrix acting on `vec(G)`.
    pub fn dense_matrix(&self) -> Matrix {
        let n = self.rows * self.cols;
        let (cr, cc) = self.compressed_shape();
        let mut s = Matrix::zeros(cr * cc, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let g = unvec(&e, self.rows, self.cols).expect("shape is consistent");
            let img = self.apply(&g).expect("shape is consistent");
            s.col_mut(j).copy_from_slice(img.as_slice());
        }
        s
    }

    /// Rebuilds a seeded transform from its family, rank, shape and stream.
    /// Gradient-derived and fixed transforms cannot be rematerialized.
    pub fn rematerialize(&self) -> Result<GradientTransform> {
        let id = self
            .provenance
            .stream()
            .ok_or_else(|| Error::Checkpoint(format!("{} transform has no seed to rebuild from", self.family.name())))?;
        self.family.build(self.rank, self.rows, self.cols, id, None)
    }
}

fn fmt_shape((r, c): (usize, usize)) -> String {
    format!("{r}x{c}")
}

fn default_persisted(p: &Provenance) -> bool {
    matches!(p, Provenance::Fixed | Provenance::Svd | Provenance::SemiOrthogonal(_))
}

fn family_of(p: &Provenance) -> TransformFamily {
    match p {
        Provenance::Gaussian(_) => TransformFamily::Gaussian,
        Provenance::Rademacher(_) => TransformFamily::Rademacher,
        Provenance::SemiOrthogonal(_) => TransformFamily::SemiOrthogonal,
        Provenance::Svd => TransformFamily::Svd,
        Provenance::Fixed => TransformFamily::Identity,
    }
}

fn check_sketch(d: usize, m: usize) -> Result<()> {
    if d == 0 || d > m {
        return Err(Error::Rank {
            what: "sketch rows",
            rank: d,
            max: m,
        });
    }
    Ok(())
}

/// `d x m` Gaussian sketch with entries `N(0, 1/m)`, so `E[P Pᵀ] = I_d`.
pub fn make_gaussian(rng: &mut Rng, d: usize, m: usize) -> Result<Matrix> {
    check_sketch(d, m)?;
    let k = 1.0 / (m as f64).sqrt();
    Ok(Matrix::from_fn(d, m, |_, _| k * rng.normal()))
}

/// `d x m` Rademacher sketch with entries `±1/√m`.
pub fn make_rademacher(rng: &mut Rng, d: usize, m: usize) -> Result<Matrix> {
    check_sketch(d, m)?;
    let k = 1.0 / (m as f64).sqrt();
    Ok(Matrix::from_fn(d, m, |_, _| k * rng.sign()))
}

/// First `d` rows of a random `m x m` orthogonal matrix: `P Pᵀ = I_d`.
pub fn make_semi_orthogonal(rng: &mut Rng, d: usize, m: usize) -> Result<Matrix> {
    check_sketch(d, m)?;
    Ok(random_orthogonal(rng, m).top_rows(d))
}

/// Top-`d` singular subspace of `grad`, on the side given by
/// [`Side::for_shape`].
pub fn make_svd_projector(grad: &Matrix, d: usize) -> Result<GradientTransform> {
    let (m, n) = grad.shape();
    if d == 0 || d > m.min(n) {
        return Err(Error::Rank {
            what: "svd projector",
            rank: d,
            max: m.min(n),
        });
    }
    let mut t = match Side::for_shape(m, n) {
        Side::Left => GradientTransform::left_only(svd_top_rows(grad, d)?, n, Provenance::Svd),
        Side::Right => GradientTransform::right_only(svd_top_right(grad, d)?, m, Provenance::Svd),
    };
    t.rank = d;
    Ok(t)
}

/// Independent Gaussian factors with `E[LᵀL] = I_m` and `E[R Rᵀ] = I_n`.
pub fn make_two_sided_gaussian(rng: &mut Rng, dl: usize, dr: usize, m: usize, n: usize) -> Result<GradientTransform> {
    check_sketch(dl, m)?;
    check_sketch(dr, n)?;
    let kl = 1.0 / (dl as f64).sqrt();
    let kr = 1.0 / (dr as f64).sqrt();
    let left = Matrix::from_fn(dl, m, |_, _| kl * rng.normal());
    let right = Matrix::from_fn(n, dr, |_, _| kr * rng.normal());
    Ok(GradientTransform::kronecker(left, right, Provenance::Fixed))
}

/// `L` = top-`d_L` left singular vectors (transposed), `R` = top-`d_R` right
/// singular vectors.
pub fn make_two_sided_svd(grad: &Matrix, dl: usize, dr: usize) -> Result<GradientTransform> {
    let (m, n) = grad.shape();
    check_sketch(dl, m)?;
    check_sketch(dr, n)?;
    let mut t = GradientTransform::kronecker(svd_top_rows(grad, dl)?, svd_top_right(grad, dr)?, Provenance::Svd);
    t.family = TransformFamily::TwoSidedSvd;
    Ok(t)
}

/// `r x (m n)` Gaussian `S` with entries `N(0, 1/(m n))`.
pub fn make_dense_gaussian(rng: &mut Rng, r: usize, m: usize, n: usize) -> Result<GradientTransform> {
    check_sketch(r, m * n)?;
    let k = 1.0 / ((m * n) as f64).sqrt();
    let s = Matrix::from_fn(r, m * n, |_, _| k * rng.normal());
    GradientTransform::dense(s, m, n, Provenance::Fixed)
}

/// The stream a layer's transform is drawn from in a given epoch (merge
/// window). Worker 0 is the single-trainer stream.
pub fn transform_stream(seed: u64, layer: usize, epoch: u64, worker: u64) -> StreamId {
    StreamId {
        seed,
        stream: stream_id(&[TRANSFORM_TAG, layer as u64, epoch, worker]),
    }
}

/// Per-layer transforms for a whole model. Biases are left untransformed.
///
/// The compressed vector concatenates, per layer, `vec(S_l W_l)` and then the
/// bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformAssignment {
    pub layers: Vec<GradientTransform>,
    pub bias_dims: Vec<Option<usize>>,
}

impl TransformAssignment {
    pub fn new(layers: Vec<GradientTransform>, specs: &[LayerSpec]) -> Result<Self> {
        if layers.len() != specs.len() {
            return Err(Error::shape("transform assignment", specs.len(), layers.len()));
        }
        for (t, s) in layers.iter().zip(specs) {
            if t.param_shape() != s.weight_shape() {
                return Err(Error::shape(
                    "transform assignment",
                    fmt_shape(s.weight_shape()),
                    fmt_shape(t.param_shape()),
                ));
            }
        }
        Ok(TransformAssignment {
            layers,
            bias_dims: specs.iter().map(|s| s.has_bias.then_some(s.out_dim)).collect(),
        })
    }

    /// Builds every layer's transform from one family. `grads` is required
    /// for gradient-based families.
    pub fn build(
        family: TransformFamily,
        rank: usize,
        specs: &[LayerSpec],
        seed: u64,
        epoch: u64,
        grads: Option<&ModelParams>,
    ) -> Result<Self> {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let (rows, cols) = s.weight_shape();
                let g = grads.map(|g| &g.layers[l].weight);
                family.build(rank, rows, cols, transform_stream(seed, l, epoch, 0), g)
            })
            .collect::<Result<Vec<_>>>()?;
        TransformAssignment::new(layers, specs)
    }

    pub fn identity(specs: &[LayerSpec]) -> Self {
        let layers = specs
            .iter()
            .map(|s| {
                let (r, c) = s.weight_shape();
                GradientTransform::identity(r, c)
            })
            .collect();
        TransformAssignment::new(layers, specs).expect("identity matches its specs")
    }

    /// Total compressed dimension, biases included.
    pub fn compressed_dim(&self) -> usize {
        self.layers
            .iter()
            .zip(&self.bias_dims)
            .map(|(t, b)| t.compressed_len() + b.unwrap_or(0))
            .sum()
    }

    /// Trainable adapter entries, biases excluded.
    pub fn adapter_dim(&self) -> usize {
        self.layers.iter().map(|t| t.compressed_len()).sum()
    }

    /// `S ∇Θ` as one flat vector.
    pub fn compress(&self, grad: &ModelParams) -> Result<Vector> {
        self.check_params(grad)?;
        let mut out = Vec::with_capacity(self.compressed_dim());
        for (t, layer) in self.layers.iter().zip(&grad.layers) {
            out.extend_from_slice(t.apply(&layer.weight)?.as_slice());
            if let Some(b) = &layer.bias {
                out.extend_from_slice(b);
            }
        }
        Ok(out.into())
    }

    /// Splits a flat compressed vector into per-layer compressed matrices and
    /// biases.
    pub fn split(&self, v: &[f64]) -> Result<Vec<(Matrix, Option<Vec<f64>>)>> {
        if v.len() != self.compressed_dim() {
            return Err(Error::shape("compressed vector", self.compressed_dim(), v.len()));
        }
        let mut at = 0;
        let mut out = Vec::with_capacity(self.layers.len());
        for (t, b) in self.layers.iter().zip(&self.bias_dims) {
            let (r, c) = t.compressed_shape();
            let m = unvec(&v[at..at + r * c], r, c)?;
            at += r * c;
            let bias = b.map(|n| {
                let s = v[at..at + n].to_vec();
                at += n;
                s
            });
            out.push((m, bias));
        }
        Ok(out)
    }

    /// Concatenates per-layer compressed matrices and biases.
    pub fn join(&self, parts: &[(Matrix, Option<Vec<f64>>)]) -> Result<Vector> {
        let mut out = Vec::with_capacity(self.compressed_dim());
        for ((m, b), t) in parts.iter().zip(&self.layers) {
            if m.shape() != t.compressed_shape() {
                return Err(Error::shape("compressed layer", fmt_shape(t.compressed_shape()), fmt_shape(m.shape())));
            }
            out.extend_from_slice(m.as_slice());
            if let Some(b) = b {
                out.extend_from_slice(b);
            }
        }
        if out.len() != self.compressed_dim() {
            return Err(Error::shape("compressed vector", self.compressed_dim(), out.len()));
        }
        Ok(out.into())
    }

    /// `Sᵀ v` in parameter layout.
    pub fn expand(&self, v: &[f64]) -> Result<ModelParams> {
        let parts = self.split(v)?;
        let layers = self
            .layers
            .iter()
            .zip(parts)
            .map(|(t, (m, bias))| {
                Ok(crate::model::LayerParams {
                    weight: t.apply_transpose(&m)?,
                    bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams { layers })
    }

    fn check_params(&self, p: &ModelParams) -> Result<()> {
        if p.layers.len() != self.layers.len() {
            return Err(Error::shape("transform assignment layers", self.layers.len(), p.layers.len()));
        }
        for ((layer, b), t) in p.layers.iter().zip(&self.bias_dims).zip(&self.layers) {
            if layer.bias.as_ref().map(|b| b.len()) != *b {
                return Err(Error::shape("bias", format!("{b:?}"), format!("{:?}", layer.bias.as_ref().map(|b| b.len()))));
            }
            if layer.weight.shape() != t.param_shape() {
                return Err(Error::shape("weight", fmt_shape(t.param_shape()), fmt_shape(layer.weight.shape())));
            }
        }
        Ok(())
    }

    pub fn stored_elements(&self) -> usize {
        self.layers.iter().map(|t| t.stored_elements()).sum()
    }
}
