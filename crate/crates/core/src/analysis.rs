//! Gradient reconstruction diagnostics and the memory estimator.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{BatchSource, LayerSpec, Mlp, ModelParams};
use crate::quant::{QuantFormat, DEFAULT_GROUP_SIZE};
use crate::trainer::{TrainConfig, TransformedRun};
use crate::transform::{two_sided_ranks, GradientTransform, TransformAssignment, TransformFamily};

/// `(‖g - SᵀSg‖², cos(g, SᵀSg))`. A zero gradient has cosine 1.
pub fn reconstruction_error(t: &GradientTransform, g: &Matrix) -> Result<(f64, f64)> {
    let back = t.project(g)?;
    let l2_sq = g.sub(&back)?.frobenius_sq();
    let (ng, nb) = (g.frobenius(), back.frobenius());
    let cosine = if ng == 0.0 {
        1.0
    } else if nb == 0.0 {
        0.0
    } else {
        (g.dot(&back)? / (ng * nb)).clamp(-1.0, 1.0)
    };
    Ok((l2_sq, cosine))
}

/// Mean over layers of [`reconstruction_error`] on the weight gradients.
pub fn layer_mean_error(t: &TransformAssignment, grad: &ModelParams) -> Result<(f64, f64)> {
    let mut l2 = 0.0;
    let mut cos = 0.0;
    for (layer, g) in t.layers.iter().zip(&grad.layers) {
        let (e, c) = reconstruction_error(layer, &g.weight)?;
        l2 += e;
        cos += c;
    }
    let n = t.layers.len().max(1) as f64;
    Ok((l2 / n, cos / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSample {
    pub step: usize,
    pub method: String,
    pub l2_sq: f64,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: String,
    pub mean_l2_sq: f64,
    pub mean_cosine: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSweep {
    pub samples: Vec<ReconstructionSample>,
    pub outcomes: Vec<MethodOutcome>,
}

impl ReconstructionSweep {
    pub fn csv(&self) -> String {
        let mut out = String::from("step,method,l2_sq,cosine\n");
        for s in &self.samples {
            writeln!(out, "{},{},{},{}", s.step, s.method, s.l2_sq, s.cosine).expect("writing to a String");
        }
        out
    }

    /// Whether the method with the lowest mean error also reached the lowest
    /// final loss.
    pub fn lowest_error_is_lowest_loss(&self) -> bool {
        let by = |f: fn(&MethodOutcome) -> f64| {
            self.outcomes
                .iter()
                .min_by(|a, b| f(a).total_cmp(&f(b)))
                .map(|o| o.method.clone())
        };
        by(|o| o.mean_l2_sq) == by(|o| o.final_loss)
    }
}

/// Trains one transformed run per family and samples the layer-mean
/// reconstruction error of the stochastic gradient every `every` steps,
/// using the transform that step actually applied.
pub fn reconstruction_sweep(
    mlp: &Mlp,
    source: &dyn BatchSource,
    init: &ModelParams,
    cfg: &TrainConfig,
    families: &[TransformFamily],
    every: usize,
) -> Result<ReconstructionSweep> {
    if every == 0 {
        return Err(Error::Config("sample interval must be positive".into()));
    }
    let mut sweep = ReconstructionSweep::default();
    for &family in families {
        let mut c = cfg.clone();
        c.transform.family = family;
        let mut run = TransformedRun::new(mlp, source, c.clone(), init.clone())?;
        let mut sum = (0.0, 0.0, 0usize);
        let mut last_loss = f64::NAN;
        for t in 0..c.steps {
            let sample = t % every == 0;
            let pre = sample.then(|| run.params.clone());
            let rec = run.step(source)?;
            last_loss = rec.loss;
            if let Some(p) = pre {
                let batches = c.microbatches(source, t);
                let mut grad: Option<ModelParams> = None;
                for b in &batches {
                    let (_, g) = mlp.loss_and_grad(&p, b)?;
                    grad = Some(match grad {
                        Some(acc) => acc.add(&g)?,
                        None => g,
                    });
                }
                let k = batches.len() as f64;
                let grad = grad.expect("at least one microbatch").map(|x| x / k);
                let (l2_sq, cosine) = layer_mean_error(&run.transforms, &grad)?;
                sum = (sum.0 + l2_sq, sum.1 + cosine, sum.2 + 1);
                sweep.samples.push(ReconstructionSample {
                    step: t,
                    method: family.name().to_string(),
                    l2_sq,
                    cosine,
                });
            }
        }
        let n = sum.2.max(1) as f64;
        sweep.outcomes.push(MethodOutcome {
            method: family.name().to_string(),
            mean_l2_sq: sum.0 / n,
            mean_cosine: sum.1 / n,
            final_loss: last_loss,
        });
    }
    Ok(sweep)
}

/// Decoder-only transformer dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub layers: usize,
    pub embed_dim: usize,
    pub intermediate_dim: usize,
    pub heads: usize,
    pub vocab: usize,
}

impl Architecture {
    pub fn llama_200m() -> Self {
        Architecture {
            layers: 12,
            embed_dim: 1024,
            intermediate_dim: 2816,
            heads: 16,
            vocab: 32000,
        }
    }

    pub fn llama_1b3() -> Self {
        Architecture {
            layers: 24,
            embed_dim: 2048,
            intermediate_dim: 5472,
            heads: 16,
            vocab: 32000,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "200m" => Ok(Self::llama_200m()),
            "1.3b" | "1b3" => Ok(Self::llama_1b3()),
            _ => Err(Error::Config(format!("unknown architecture preset {name:?}"))),
        }
    }

    /// `(rows, cols)` of every block linear: q, k, v, o, then gate, up, down.
    pub fn block_linears(&self) -> Vec<(usize, usize)> {
        let (e, i) = (self.embed_dim, self.intermediate_dim);
        let one = [(e, e), (e, e), (e, e), (e, e), (i, e), (i, e), (e, i)];
        (0..self.layers).flat_map(|_| one).collect()
    }

    /// Untied input and output embeddings plus RMSNorm gains.
    pub fn other_params(&self) -> u64 {
        let e = self.embed_dim as u64;
        2 * self.vocab as u64 * e + (2 * self.layers as u64 + 1) * e
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByteWidths {
    pub weight: u32,
    pub grad: u32,
    pub state: u32,
    pub scale: u32,
}

impl Default for ByteWidths {
    fn default() -> Self {
        ByteWidths {
            weight: 2,
            grad: 2,
            state: 2,
            scale: 4,
        }
    }
}

/// Inputs of the estimator. Adapted matrices get the method's treatment;
/// everything else is trained directly in every method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub adapted: Vec<(usize, usize)>,
    pub direct_params: u64,
    pub widths: ByteWidths,
    pub rank: usize,
    pub group_size: usize,
}

impl MemoryModel {
    pub fn for_architecture(arch: &Architecture, rank: usize) -> Self {
        MemoryModel {
            adapted: arch.block_linears(),
            direct_params: arch.other_params(),
            widths: ByteWidths::default(),
            rank,
            group_size: DEFAULT_GROUP_SIZE,
        }
    }

    /// Weights adapted, biases trained directly.
    pub fn for_mlp(layers: &[LayerSpec], rank: usize) -> Self {
        MemoryModel {
            adapted: layers.iter().map(LayerSpec::weight_shape).collect(),
            direct_params: layers.iter().filter(|l| l.has_bias).map(|l| l.out_dim as u64).sum(),
            widths: ByteWidths::default(),
            rank,
            group_size: DEFAULT_GROUP_SIZE,
        }
    }

    pub fn num_params(&self) -> u64 {
        self.adapted.iter().map(|&(m, n)| (m * n) as u64).sum::<u64>() + self.direct_params
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryMethod {
    Full,
    Relora,
    Projected(TransformFamily),
}

/// A method row, e.g. `gaussian+int8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MethodSpec {
    pub method: MemoryMethod,
    pub quant: Option<QuantFormat>,
}

impl MethodSpec {
    /// Every method row: full, ReLoRA, then each projected family plain, INT8 and NF4.
    pub fn table_rows() -> Vec<MethodSpec> {
        let mut rows = vec![
            MethodSpec { method: MemoryMethod::Full, quant: None },
            MethodSpec { method: MemoryMethod::Relora, quant: None },
        ];
        for f in [
            TransformFamily::Svd,
            TransformFamily::Gaussian,
            TransformFamily::Rademacher,
            TransformFamily::SemiOrthogonal,
            TransformFamily::TwoSidedGaussian,
            TransformFamily::TwoSidedSvd,
        ] {
            for quant in [None, Some(QuantFormat::Int8), Some(QuantFormat::Nf4)] {
                rows.push(MethodSpec {
                    method: MemoryMethod::Projected(f),
                    quant,
                });
            }
        }
        rows
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.method {
            MemoryMethod::Full => f.write_str("full")?,
            MemoryMethod::Relora => f.write_str("relora")?,
            MemoryMethod::Projected(fam) => f.write_str(fam.name())?,
        }
        if let Some(q) = self.quant {
            write!(f, "+{}", q.name())?;
        }
        Ok(())
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownMethod(s.to_string());
        let (base, quant) = match s.split_once('+') {
            Some((b, "int8")) => (b, Some(QuantFormat::Int8)),
            Some((b, "nf4")) => (b, Some(QuantFormat::Nf4)),
            Some(_) => return Err(unknown()),
            None => (s, None),
        };
        let method = match base {
            "full" => MemoryMethod::Full,
            "relora" => MemoryMethod::Relora,
            _ => {
                let fam = TransformFamily::ALL
                    .into_iter()
                    .find(|f| f.name() == base)
                    .ok_or_else(unknown)?;
                if matches!(fam, TransformFamily::Identity | TransformFamily::DenseGaussian) {
                    return Err(unknown());
                }
                MemoryMethod::Projected(fam)
            }
        };
        // full training updates the weights themselves, so there is no frozen base to quantize
        if method == MemoryMethod::Full && quant.is_some() {
            return Err(unknown());
        }
        Ok(MethodSpec { method, quant })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub name: String,
    pub elements: u64,
    pub bits: u32,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub method: String,
    pub items: Vec<MemoryItem>,
    pub total_bytes: u64,
}

impl MemoryBreakdown {
    pub fn item(&self, name: &str) -> u64 {
        self.items.iter().filter(|i| i.name == name).map(|i| i.bytes).sum()
    }

    pub fn gib(&self) -> f64 {
        self.total_bytes as f64 / (1u64 << 30) as f64
    }
}

struct Items(Vec<MemoryItem>);

impl Items {
    fn push(&mut self, name: &str, elements: u64, bits: u32) {
        self.0.push(MemoryItem {
            name: name.to_string(),
            elements,
            bits,
            bytes: (elements * bits as u64).div_ceil(8),
        });
    }
}

/// Itemized bytes excluding activations. Each item is
/// `elements × bits / 8`; gradients and optimizer states cover only what
/// trains, and gradients of adapter methods are held in the compressed space.
pub fn memory_estimate(mm: &MemoryModel, method: &str) -> Result<MemoryBreakdown> {
    let spec: MethodSpec = method.parse()?;
    if mm.rank == 0 && spec.method != MemoryMethod::Full {
        return Err(Error::Rank {
            what: "memory estimate rank",
            rank: 0,
            max: mm.adapted.iter().map(|&(m, n)| m.min(n)).max().unwrap_or(0),
        });
    }
    let w = mm.widths;
    let adapted: u64 = mm.adapted.iter().map(|&(m, n)| (m * n) as u64).sum();

    let mut trainable = 0u64;
    let mut projectors = 0u64;
    for &(m, n) in &mm.adapted {
        let d = mm.rank.min(m.min(n));
        let (m64, n64, d64) = (m as u64, n as u64, d as u64);
        match spec.method {
            MemoryMethod::Full => {}
            MemoryMethod::Relora => trainable += d64 * (m64 + n64),
            MemoryMethod::Projected(f) => match f {
                TransformFamily::TwoSidedGaussian | TransformFamily::TwoSidedSvd => {
                    let (dl, dr) = two_sided_ranks(d, m, n);
                    trainable += (dl * dr) as u64;
                    if f == TransformFamily::TwoSidedSvd {
                        projectors += (dl * m + n * dr) as u64;
                    }
                }
                TransformFamily::Kronecker => {
                    trainable += (mm.rank.min(m) * (2 * mm.rank).min(n)) as u64;
                }
                _ => {
                    trainable += d64 * m64.max(n64);
                    if matches!(f, TransformFamily::Svd | TransformFamily::SemiOrthogonal) {
                        projectors += d64 * m64.min(n64);
                    }
                }
            },
        }
    }

    let mut items = Items(Vec::new());
    match spec.quant {
        None => items.push("base_weights", adapted, 8 * w.weight),
        Some(q) => {
            items.push("base_weights", adapted, q.bits() as u32);
            let groups: u64 = mm
                .adapted
                .iter()
                .map(|&(m, n)| ((m * n) as u64).div_ceil(mm.group_size as u64))
                .sum();
            items.push("quant_scales", groups, 8 * w.scale);
        }
    }
    items.push("direct_weights", mm.direct_params, 8 * w.weight);
    items.push("trainable", trainable, 8 * w.weight);
    let trained = match spec.method {
        MemoryMethod::Full => adapted + mm.direct_params,
        _ => trainable + mm.direct_params,
    };
    items.push("gradients", trained, 8 * w.grad);
    items.push("optimizer_states", 2 * trained, 8 * w.state);
    items.push("projectors", projectors, 8 * w.weight);
    // refreshing an SVD projector needs one full gradient matrix at a time
    let workspace = match spec.method {
        MemoryMethod::Projected(TransformFamily::Svd | TransformFamily::TwoSidedSvd) => {
            mm.adapted.iter().map(|&(m, n)| (m * n) as u64).max().unwrap_or(0)
        }
        _ => 0,
    };
    items.push("refresh_workspace", workspace, 8 * w.grad);

    let total_bytes = items.0.iter().map(|i| i.bytes).sum();
    Ok(MemoryBreakdown {
        method: spec.to_string(),
        items: items.0,
        total_bytes,
    })
}

/// Estimates for every row of [`MethodSpec::table_rows`].
pub fn memory_table(mm: &MemoryModel) -> Result<Vec<MemoryBreakdown>> {
    MethodSpec::table_rows()
        .iter()
        .map(|m| memory_estimate(mm, &m.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::transform::make_semi_orthogonal;

    fn total(mm: &MemoryModel, m: &str) -> u64 {
        memory_estimate(mm, m).unwrap().total_bytes
    }

    #[test]
    fn full_rank_semi_orthogonal_reconstructs_exactly() {
        let mut rng = Rng::new(1, 1);
        let g = Matrix::from_fn(5, 7, |_, _| rng.normal());
        let p = make_semi_orthogonal(&mut rng, 5, 5).unwrap();
        let t = GradientTransform::left_only(p, 7, crate::transform::Provenance::Fixed);
        let (e, c) = reconstruction_error(&t, &g).unwrap();
        assert!(e < 1e-20 && (c - 1.0).abs() < 1e-10);
        let (e, c) = reconstruction_error(&t, &Matrix::zeros(5, 7)).unwrap();
        assert_eq!((e, c), (0.0, 1.0));
    }

    #[test]
    fn sweep_samples_every_interval() {
        use crate::model::{LossKind, Nonlinearity, SyntheticTask, TaskKind, TaskSpec};
        use crate::optim::OptimizerKind;
        use crate::trainer::TransformSpec;
        let task = SyntheticTask::new(
            3,
            TaskSpec {
                kind: TaskKind::Regression,
                in_dim: 8,
                out_dim: 8,
                teacher_hidden: vec![8],
                batch_size: 8,
                num_batches: None,
                noise: 0.0,
            },
        )
        .unwrap();
        let mlp = Mlp::new(
            vec![
                LayerSpec::new(8, 12, Nonlinearity::Tanh, true),
                LayerSpec::new(12, 8, Nonlinearity::Identity, true),
            ],
            LossKind::Mse,
        )
        .unwrap();
        let init = mlp.init_params(&mut Rng::new(1, 2));
        let mut cfg = TrainConfig::new(50, OptimizerKind::adam(1e-2), TransformSpec { family: TransformFamily::Gaussian, rank: 2 });
        cfg.merge_every = 20;
        let fams = [TransformFamily::Svd, TransformFamily::Gaussian];
        let sweep = reconstruction_sweep(&mlp, &task, &init, &cfg, &fams, 10).unwrap();
        assert_eq!(sweep.samples.len(), 10);
        assert_eq!(sweep.csv().lines().count(), 11);
        // step 0 and refresh steps use an SVD of exactly the sampled gradient
        let svd = &sweep.outcomes[0];
        let gauss = &sweep.outcomes[1];
        assert!(svd.mean_l2_sq < gauss.mean_l2_sq);
        for s in &sweep.samples {
            assert!(s.l2_sq.is_finite() && s.cosine.abs() <= 1.0);
        }
    }

    #[test]
    fn full_training_is_eight_bytes_per_param() {
        let mm = MemoryModel::for_architecture(&Architecture::llama_200m(), 256);
        assert_eq!(total(&mm, "full"), 8 * mm.num_params());
    }

    #[test]
    fn persistence_is_the_only_difference_between_gaussian_and_semi_orthogonal() {
        let mm = MemoryModel::for_architecture(&Architecture::llama_200m(), 256);
        let g = memory_estimate(&mm, "gaussian").unwrap();
        let s = memory_estimate(&mm, "semi_orthogonal").unwrap();
        assert_eq!(g.item("projectors"), 0);
        assert_eq!(s.total_bytes - g.total_bytes, s.item("projectors"));
        assert_eq!(g, MemoryBreakdown { method: "gaussian".into(), ..memory_estimate(&mm, "rademacher").unwrap() });
    }

    #[test]
    fn table_ordering_at_200m() {
        let mm = MemoryModel::for_architecture(&Architecture::llama_200m(), 256);
        let t = |m: &str| total(&mm, m);
        assert!(t("full") > t("relora"));
        assert!(t("relora") > t("svd"));
        assert!(t("svd") > t("semi_orthogonal"));
        assert!(t("semi_orthogonal") >= t("gaussian"));
        assert_eq!(t("gaussian"), t("rademacher"));
        for f in ["svd", "gaussian", "rademacher", "semi_orthogonal", "two_sided_gaussian", "two_sided_svd"] {
            assert!(t(f) > t(&format!("{f}+int8")));
            assert!(t(&format!("{f}+int8")) > t(&format!("{f}+nf4")));
        }
    }

    #[test]
    fn monotone_in_rank() {
        let arch = Architecture::llama_200m();
        for m in ["relora", "svd", "gaussian", "two_sided_svd", "semi_orthogonal+nf4"] {
            let mut prev = 0;
            for r in [16, 64, 128, 256, 512] {
                let b = total(&MemoryModel::for_architecture(&arch, r), m);
                assert!(b >= prev, "{m} at rank {r}");
                prev = b;
            }
        }
    }

    #[test]
    fn unknown_methods_are_rejected() {
        let mm = MemoryModel::for_architecture(&Architecture::llama_200m(), 256);
        for m in ["lora", "full+int8", "gaussian+fp8", "identity", ""] {
            assert!(matches!(memory_estimate(&mm, m), Err(Error::UnknownMethod(_))), "{m}");
        }
    }

    #[test]
    fn method_names_round_trip() {
        for row in MethodSpec::table_rows() {
            assert_eq!(row.to_string().parse::<MethodSpec>().unwrap(), row);
        }
    }

    #[test]
    fn items_sum_to_total() {
        let mm = MemoryModel::for_architecture(&Architecture::llama_1b3(), 512);
        for b in memory_table(&mm).unwrap() {
            assert_eq!(b.items.iter().map(|i| i.bytes).sum::<u64>(), b.total_bytes);
            for i in &b.items {
                assert_eq!(i.bytes, (i.elements * i.bits as u64).div_ceil(8));
            }
        }
    }
}
