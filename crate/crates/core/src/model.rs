//! A small multilayer perceptron with exact analytic gradients.
//!
//! Trainable parameters flatten in a fixed order: layers in definition order,
//! and within a layer `vec(W)` (column-major) followed by the bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{unvec, Matrix, Vector};
use crate::rng::{stream_id, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Identity,
    Tanh,
    Relu,
}

impl Nonlinearity {
    fn apply(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Identity => z,
            Nonlinearity::Tanh => z.tanh(),
            Nonlinearity::Relu => z.max(0.0),
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Nonlinearity::Identity => 1.0,
            Nonlinearity::Tanh => 1.0 - a * a,
            Nonlinearity::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, nonlinearity: Nonlinearity, has_bias: bool) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            nonlinearity,
            has_bias,
        }
    }

    pub fn weight_shape(&self) -> (usize, usize) {
        (self.out_dim, self.in_dim)
    }

    pub fn num_params(&self) -> usize {
        self.out_dim * self.in_dim + if self.has_bias { self.out_dim } else { 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over the batch of the summed squared error.
    #[default]
    Mse,
    /// Mean softmax cross-entropy against integer labels.
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn zeros(specs: &[LayerSpec]) -> Self {
        ModelParams {
            layers: specs
                .iter()
                .map(|s| LayerParams {
                    weight: Matrix::zeros(s.out_dim, s.in_dim),
                    bias: s.has_bias.then(|| vec![0.0; s.out_dim]),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.as_ref().map_or(0, Vec::len))
            .sum()
    }

    pub fn flatten(&self) -> Vector {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            if let Some(b) = &layer.bias {
                out.extend_from_slice(b);
            }
        }
        out.into()
    }

    pub fn unflatten(specs: &[LayerSpec], theta: &[f64]) -> Result<Self> {
        let total: usize = specs.iter().map(LayerSpec::num_params).sum();
        if theta.len() != total {
            return Err(Error::shape("unflatten", total, theta.len()));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(specs.len());
        for s in specs {
            let n = s.out_dim * s.in_dim;
            let weight = unvec(&theta[offset..offset + n], s.out_dim, s.in_dim)?;
            offset += n;
            let bias = if s.has_bias {
                let b = theta[offset..offset + s.out_dim].to_vec();
                offset += s.out_dim;
                Some(b)
            } else {
                None
            };
            layers.push(LayerParams { weight, bias });
        }
        Ok(ModelParams { layers })
    }

    /// `self - other`, layer by layer.
    pub fn sub(&self, other: &ModelParams) -> Result<ModelParams> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &ModelParams) -> Result<ModelParams> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, alpha: f64) -> ModelParams {
        self.map(|x| alpha * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ModelParams {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: Matrix::from_col_major(
                        l.weight.rows(),
                        l.weight.cols(),
                        l.weight.as_slice().iter().map(|&x| f(x)).collect(),
                    )
                    .expect("same shape"),
                    bias: l.bias.as_ref().map(|b| b.iter().map(|&x| f(x)).collect()),
                })
                .collect(),
        }
    }

    pub fn zip_with(&self, other: &ModelParams, f: impl Fn(f64, f64) -> f64) -> Result<ModelParams> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("params", self.layers.len(), other.layers.len()));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.weight.shape() != b.weight.shape()
                || a.bias.as_ref().map(Vec::len) != b.bias.as_ref().map(Vec::len)
            {
                return Err(Error::shape(
                    "params",
                    format!("{:?}", a.weight.shape()),
                    format!("{:?}", b.weight.shape()),
                ));
            }
            let w: Vec<f64> = a
                .weight
                .as_slice()
                .iter()
                .zip(b.weight.as_slice())
                .map(|(&x, &y)| f(x, y))
                .collect();
            layers.push(LayerParams {
                weight: Matrix::from_col_major(a.weight.rows(), a.weight.cols(), w)?,
                bias: match (&a.bias, &b.bias) {
                    (Some(x), Some(y)) => Some(x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()),
                    _ => None,
                },
            });
        }
        Ok(ModelParams { layers })
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().max_abs()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.is_finite() && l.bias.as_ref().is_none_or(|b| b.iter().all(|x| x.is_finite()))
        })
    }

    /// FNV-1a over the bit patterns of the flattened parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fingerprint::default();
        for l in &self.layers {
            h.write_f64s(l.weight.as_slice());
            if let Some(b) = &l.bias {
                h.write_f64s(b);
            }
        }
        h.finish()
    }
}

#[derive(Clone, Copy)]
pub struct Fingerprint(u64);

impl Default for Fingerprint {
    fn default() -> Self {
        Fingerprint(0xcbf2_9ce4_8422_2325)
    }
}

impl Fingerprint {
    pub fn write_u64(&mut self, x: u64) {
        for byte in x.to_le_bytes() {
            self.0 ^= u64::from(byte);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.write_u64(x.to_bits());
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// `out_dim x batch` regression targets.
    Values(Matrix),
    /// One class index per column.
    Labels(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `in_dim x batch`
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.inputs.cols()
    }

    /// Concatenates batches column-wise.
    pub fn concat(batches: &[Batch]) -> Result<Batch> {
        let inputs = Matrix::hstack(&batches.iter().map(|b| b.inputs.clone()).collect::<Vec<_>>())?;
        let targets = match batches.first().map(|b| &b.targets) {
            Some(Targets::Labels(_)) => {
                let mut all = Vec::new();
                for b in batches {
                    match &b.targets {
                        Targets::Labels(l) => all.extend_from_slice(l),
                        Targets::Values(_) => return Err(Error::shape("concat", "labels", "values")),
                    }
                }
                Targets::Labels(all)
            }
            _ => {
                let mut mats = Vec::new();
                for b in batches {
                    match &b.targets {
                        Targets::Values(v) => mats.push(v.clone()),
                        Targets::Labels(_) => return Err(Error::shape("concat", "values", "labels")),
                    }
                }
                Targets::Values(Matrix::hstack(&mats)?)
            }
        };
        Ok(Batch { inputs, targets })
    }

    fn fingerprint(&self) -> u64 {
        let mut h = Fingerprint::default();
        h.write_f64s(self.inputs.as_slice());
        match &self.targets {
            Targets::Values(v) => h.write_f64s(v.as_slice()),
            Targets::Labels(l) => l.iter().for_each(|&x| h.write_u64(x as u64)),
        }
        h.finish()
    }
}

/// Per-layer intermediates from [`Mlp::forward`], consumed by
/// [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    params_fp: u64,
    batch_fp: u64,
    /// `activations[0]` is the input; `activations[l + 1]` is layer `l`'s output.
    activations: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("at least the input")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub loss: LossKind,
}

impl Mlp {
    pub fn new(layers: Vec<LayerSpec>, loss: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::Config(format!("layer {i} has a zero dimension")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::Config(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    w[0].out_dim,
                    i + 1,
                    w[1].in_dim
                )));
            }
        }
        Ok(Mlp { layers, loss })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::num_params).sum()
    }

    /// Weights `~ N(0, 1/in_dim)`, biases `~ N(0, 0.01)`.
    pub fn init_params(&self, rng: &mut Rng) -> ModelParams {
        let layers = self
            .layers
            .iter()
            .map(|s| {
                let std = 1.0 / (s.in_dim as f64).sqrt();
                let weight = Matrix::from_fn(s.out_dim, s.in_dim, |_, _| std * rng.normal());
                let bias = s
                    .has_bias
                    .then(|| (0..s.out_dim).map(|_| 0.1 * rng.normal()).collect());
                LayerParams { weight, bias }
            })
            .collect();
        ModelParams { layers }
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.layers.len() != self.layers.len() {
            return Err(Error::shape("params", self.layers.len(), params.layers.len()));
        }
        for (s, p) in self.layers.iter().zip(&params.layers) {
            if p.weight.shape() != s.weight_shape()
                || p.bias.as_ref().map(Vec::len) != s.has_bias.then_some(s.out_dim)
            {
                return Err(Error::shape(
                    "params",
                    format!("{:?} bias={}", s.weight_shape(), s.has_bias),
                    format!("{:?} bias={}", p.weight.shape(), p.bias.is_some()),
                ));
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.inputs.rows() != self.in_dim() {
            return Err(Error::shape("batch inputs", self.in_dim(), batch.inputs.rows()));
        }
        match (&batch.targets, self.loss) {
            (Targets::Values(t), LossKind::Mse) => {
                if t.shape() != (self.out_dim(), batch.size()) {
                    return Err(Error::shape(
                        "batch targets",
                        format!("{}x{}", self.out_dim(), batch.size()),
                        format!("{}x{}", t.rows(), t.cols()),
                    ));
                }
            }
            (Targets::Labels(l), LossKind::CrossEntropy) => {
                if l.len() != batch.size() {
                    return Err(Error::shape("batch labels", batch.size(), l.len()));
                }
                if let Some(&bad) = l.iter().find(|&&c| c >= self.out_dim()) {
                    return Err(Error::shape("label", format!("< {}", self.out_dim()), bad));
                }
            }
            (Targets::Values(_), LossKind::CrossEntropy) => {
                return Err(Error::shape("batch targets", "labels", "values"))
            }
            (Targets::Labels(_), LossKind::Mse) => {
                return Err(Error::shape("batch targets", "values", "labels"))
            }
        }
        Ok(())
    }

    pub fn forward(&self, params: &ModelParams, batch: &Batch) -> Result<(f64, ForwardCache)> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let mut activations = vec![batch.inputs.clone()];
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        for (spec, p) in self.layers.iter().zip(&params.layers) {
            let mut z = p.weight.matmul(activations.last().expect("nonempty"))?;
            if let Some(b) = &p.bias {
                for j in 0..z.cols() {
                    for (zi, bi) in z.col_mut(j).iter_mut().zip(b) {
                        *zi += bi;
                    }
                }
            }
            let a = Matrix::from_fn(z.rows(), z.cols(), |i, j| spec.nonlinearity.apply(z[(i, j)]));
            pre_activations.push(z);
            activations.push(a);
        }
        let out = activations.last().expect("nonempty");
        let loss = match &batch.targets {
            Targets::Values(t) => {
                let sq: f64 = out
                    .as_slice()
                    .iter()
                    .zip(t.as_slice())
                    .map(|(y, t)| (y - t) * (y - t))
                    .sum();
                sq / batch.size() as f64
            }
            Targets::Labels(labels) => {
                let mut total = 0.0;
                for (j, &c) in labels.iter().enumerate() {
                    let col = out.col(j);
                    total += log_sum_exp(col) - col[c];
                }
                total / batch.size() as f64
            }
        };
        Ok((
            loss,
            ForwardCache {
                params_fp: params.fingerprint(),
                batch_fp: batch.fingerprint(),
                activations,
                pre_activations,
            },
        ))
    }

    /// Gradient of the loss with respect to every trainable, shaped like
    /// `params`.
    pub fn backward(
        &self,
        params: &ModelParams,
        batch: &Batch,
        cache: &ForwardCache,
    ) -> Result<ModelParams> {
        if cache.params_fp != params.fingerprint() || cache.batch_fp != batch.fingerprint() {
            return Err(Error::StaleCache);
        }
        let bsz = batch.size() as f64;
        let out = cache.output();
        // dL/d(output)
        let mut upstream = match &batch.targets {
            Targets::Values(t) => Matrix::from_fn(out.rows(), out.cols(), |i, j| {
                2.0 * (out[(i, j)] - t[(i, j)]) / bsz
            }),
            Targets::Labels(labels) => {
                let mut g = Matrix::zeros(out.rows(), out.cols());
                for (j, &c) in labels.iter().enumerate() {
                    let col = out.col(j);
                    let lse = log_sum_exp(col);
                    for (i, gi) in g.col_mut(j).iter_mut().enumerate() {
                        *gi = ((col[i] - lse).exp() - if i == c { 1.0 } else { 0.0 }) / bsz;
                    }
                }
                g
            }
        };

        let mut grads: Vec<LayerParams> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let spec = &self.layers[l];
            let z = &cache.pre_activations[l];
            let a = &cache.activations[l + 1];
            let delta = Matrix::from_fn(z.rows(), z.cols(), |i, j| {
                upstream[(i, j)] * spec.nonlinearity.derivative(z[(i, j)], a[(i, j)])
            });
            let weight = delta.matmul_t(&cache.activations[l])?;
            let bias = spec.has_bias.then(|| {
                (0..delta.rows())
                    .map(|i| (0..delta.cols()).map(|j| delta[(i, j)]).sum())
                    .collect()
            });
            if l > 0 {
                upstream = params.layers[l].weight.t_matmul(&delta)?;
            }
            grads.push(LayerParams { weight, bias });
        }
        grads.reverse();
        Ok(ModelParams { layers: grads })
    }

    /// Loss and gradient in one call.
    pub fn loss_and_grad(&self, params: &ModelParams, batch: &Batch) -> Result<(f64, ModelParams)> {
        let (loss, cache) = self.forward(params, batch)?;
        let grad = self.backward(params, batch, &cache)?;
        Ok((loss, grad))
    }

    pub fn loss(&self, params: &ModelParams, batch: &Batch) -> Result<f64> {
        Ok(self.forward(params, batch)?.0)
    }

    /// Central finite-difference estimate of the gradient, in the flattened
    /// parameter order.
    pub fn fd_gradient(&self, params: &ModelParams, batch: &Batch, h: f64) -> Result<Vector> {
        if h <= 0.0 {
            return Err(Error::Config("finite-difference step must be positive".into()));
        }
        let theta = params.flatten();
        let mut out = Vec::with_capacity(theta.dim());
        let mut probe = theta.clone().into_vec();
        for i in 0..theta.dim() {
            probe[i] = theta[i] + h;
            let up = self.loss(&ModelParams::unflatten(&self.layers, &probe)?, batch)?;
            probe[i] = theta[i] - h;
            let down = self.loss(&ModelParams::unflatten(&self.layers, &probe)?, batch)?;
            probe[i] = theta[i];
            out.push((up - down) / (2.0 * h));
        }
        Ok(out.into())
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification { classes: usize },
}

/// Synthetic teacher-student task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub in_dim: usize,
    /// Regression output width; ignored for classification.
    #[serde(default)]
    pub out_dim: usize,
    #[serde(default)]
    pub teacher_hidden: Vec<usize>,
    pub batch_size: usize,
    /// Length of [`SyntheticTask::stream`]; `None` is unbounded.
    #[serde(default)]
    pub num_batches: Option<usize>,
    #[serde(default)]
    pub noise: f64,
}

impl TaskSpec {
    pub fn outputs(&self) -> usize {
        match self.kind {
            TaskKind::Regression => self.out_dim,
            TaskKind::Classification { classes } => classes,
        }
    }

    pub fn loss(&self) -> LossKind {
        match self.kind {
            TaskKind::Regression => LossKind::Mse,
            TaskKind::Classification { .. } => LossKind::CrossEntropy,
        }
    }
}

const TEACHER_STREAM: u64 = 0x7EAC;
const BATCH_STREAM: u64 = 0xBA7C;

/// Anything that can produce batch `index` of data shard `shard`.
pub trait BatchSource {
    fn batch(&self, shard: u64, index: u64) -> Batch;
}

impl BatchSource for SyntheticTask {
    fn batch(&self, shard: u64, index: u64) -> Batch {
        SyntheticTask::batch(self, shard, index)
    }
}

/// Deterministic source of batches from a fixed random teacher network.
///
/// Batch `(shard, index)` is drawn from its own counter-based stream, so any
/// batch can be regenerated in isolation.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    seed: u64,
    teacher: Mlp,
    teacher_params: ModelParams,
}

impl SyntheticTask {
    pub fn new(seed: u64, spec: TaskSpec) -> Result<Self> {
        if spec.batch_size == 0 || spec.in_dim == 0 || spec.outputs() == 0 {
            return Err(Error::Config("task dimensions must be positive".into()));
        }
        let mut dims = vec![spec.in_dim];
        dims.extend_from_slice(&spec.teacher_hidden);
        dims.push(spec.outputs());
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let nl = if i + 1 == n {
                    Nonlinearity::Identity
                } else {
                    Nonlinearity::Tanh
                };
                LayerSpec::new(w[0], w[1], nl, true)
            })
            .collect();
        let teacher = Mlp::new(layers, LossKind::Mse)?;
        let mut rng = Rng::new(seed, stream_id(&[TEACHER_STREAM]));
        let mut teacher_params = teacher.init_params(&mut rng);
        // Scale up the readout so targets are O(1).
        let last = teacher_params.layers.last_mut().expect("nonempty");
        last.weight.scale_mut(2.0);
        Ok(SyntheticTask {
            spec,
            seed,
            teacher,
            teacher_params,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Noise-free teacher outputs for `inputs`.
    pub fn teacher_outputs(&self, inputs: &Matrix) -> Result<Matrix> {
        let zeros = Batch {
            inputs: inputs.clone(),
            targets: Targets::Values(Matrix::zeros(self.teacher.out_dim(), inputs.cols())),
        };
        let (_, cache) = self.teacher.forward(&self.teacher_params, &zeros)?;
        Ok(cache.output().clone())
    }

    pub fn batch(&self, shard: u64, index: u64) -> Batch {
        let mut rng = Rng::new(self.seed, stream_id(&[BATCH_STREAM, shard, index]));
        let b = self.spec.batch_size;
        let inputs = Matrix::from_fn(self.spec.in_dim, b, |_, _| rng.normal());
        let clean = self.teacher_outputs(&inputs).expect("teacher shapes are consistent");
        let noise = self.spec.noise;
        let targets = match self.spec.kind {
            TaskKind::Regression => {
                let mut t = clean;
                if noise != 0.0 {
                    for x in t.as_mut_slice() {
                        *x += noise * rng.normal();
                    }
                }
                Targets::Values(t)
            }
            TaskKind::Classification { classes } => {
                let labels = (0..b)
                    .map(|j| {
                        let mut best = 0;
                        let mut best_v = f64::NEG_INFINITY;
                        for c in 0..classes {
                            let mut v = clean[(c, j)];
                            if noise != 0.0 {
                                v += noise * rng.normal();
                            }
                            if v > best_v {
                                best_v = v;
                                best = c;
                            }
                        }
                        best
                    })
                    .collect();
                Targets::Labels(labels)
            }
        };
        Batch { inputs, targets }
    }

    /// Held-out batch of `size` examples, disjoint from every training shard.
    pub fn eval_batch(&self, size: usize) -> Batch {
        let mut spec = self.spec.clone();
        spec.batch_size = size;
        let task = SyntheticTask {
            spec,
            seed: self.seed,
            teacher: self.teacher.clone(),
            teacher_params: self.teacher_params.clone(),
        };
        task.batch(u64::MAX, 0)
    }

    pub fn stream(&self, shard: u64) -> impl Iterator<Item = Batch> + '_ {
        let limit = self.spec.num_batches.unwrap_or(usize::MAX);
        (0..limit as u64).map(move |i| self.batch(shard, i))
    }
}
