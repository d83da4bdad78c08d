//! Linear adapters: effective parameters `Θ₀ + Sᵀ Λ` with only `Λ` trained.
//!
//! `Λ` uses the compressed layout of [`TransformAssignment`]: per layer the
//! adapter matrix `A` followed by a bias delta. Biases go through an
//! identity transform, so they are effectively trained directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{Batch, LayerParams, Mlp, ModelParams};
use crate::quant::{Quantizer, StoredWeight};
use crate::transform::TransformAssignment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub weight: StoredWeight,
    pub bias: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FrozenBase {
    Exact(ModelParams),
    Quantized {
        quantizer: Quantizer,
        layers: Vec<QuantizedLayer>,
    },
}

impl FrozenBase {
    pub fn quantize(params: &ModelParams, quantizer: Quantizer) -> Result<Self> {
        let layers = params
            .layers
            .iter()
            .map(|l| {
                Ok(QuantizedLayer {
                    weight: quantizer.store(&l.weight)?,
                    bias: l.bias.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FrozenBase::Quantized { quantizer, layers })
    }

    /// Full-precision view of the base.
    pub fn dequantize(&self) -> Result<ModelParams> {
        match self {
            FrozenBase::Exact(p) => Ok(p.clone()),
            FrozenBase::Quantized { layers, .. } => Ok(ModelParams {
                layers: layers
                    .iter()
                    .map(|l| {
                        Ok(LayerParams {
                            weight: l.weight.dequantize()?,
                            bias: l.bias.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            }),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, FrozenBase::Quantized { .. })
    }

    /// Mutable weight of layer `l`, when the base holds it at full precision.
    pub fn weight_mut(&mut self, l: usize) -> Result<&mut Matrix> {
        match self {
            FrozenBase::Exact(p) => Ok(&mut p.layers[l].weight),
            FrozenBase::Quantized { layers, .. } => match &mut layers[l].weight {
                StoredWeight::Raw(m) => Ok(m),
                StoredWeight::Quantized(_) => Err(Error::QuantizedBase),
            },
        }
    }

    fn num_layers(&self) -> usize {
        match self {
            FrozenBase::Exact(p) => p.layers.len(),
            FrozenBase::Quantized { layers, .. } => layers.len(),
        }
    }
}

/// What a merge did to the represented function.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    /// Max absolute change of any effective weight caused by re-quantizing
    /// the merged base. Zero for a full-precision base.
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub base: FrozenBase,
    pub transforms: TransformAssignment,
    /// Flat `Λ` in the assignment's compressed layout.
    pub lambda: Vector,
}

impl AdapterSet {
    /// Fresh adapters at `Λ = 0` over a full-precision base.
    pub fn new(base: ModelParams, transforms: TransformAssignment) -> Result<Self> {
        Self::over(FrozenBase::Exact(base), transforms)
    }

    pub fn over(base: FrozenBase, transforms: TransformAssignment) -> Result<Self> {
        if base.num_layers() != transforms.layers.len() {
            return Err(Error::shape("adapter base layers", transforms.layers.len(), base.num_layers()));
        }
        let lambda = Vector::zeros(transforms.compressed_dim());
        let set = AdapterSet {
            base,
            transforms,
            lambda,
        };
        // surfaces shape mismatches between base and transforms
        set.materialize()?;
        Ok(set)
    }

    /// Starts from `Λ₀ ≠ 0` while keeping the effective parameters at
    /// `theta0`, by storing `Θ₀ - Sᵀ Λ₀` as the base.
    pub fn with_initial_adapter(theta0: &ModelParams, transforms: TransformAssignment, lambda0: Vector) -> Result<Self> {
        let offset = transforms.expand(&lambda0)?;
        let base = theta0.sub(&offset)?;
        let mut set = AdapterSet::new(base, transforms)?;
        set.lambda = lambda0;
        Ok(set)
    }

    /// Number of trained scalars, biases included.
    pub fn trainable_count(&self) -> usize {
        self.lambda.len()
    }

    /// Per-layer `(A, bias delta)`.
    pub fn adapters(&self) -> Result<Vec<(Matrix, Option<Vec<f64>>)>> {
        self.transforms.split(&self.lambda)
    }

    /// `Θ₀ + Sᵀ Λ` for a full-precision base.
    pub fn effective_params(&self) -> Result<ModelParams> {
        match &self.base {
            FrozenBase::Exact(base) => self.add_adapters(base),
            FrozenBase::Quantized { .. } => Err(Error::QuantizedBase),
        }
    }

    /// `dequantize(Θ₀) + Sᵀ Λ`; works for any base.
    pub fn materialize(&self) -> Result<ModelParams> {
        match &self.base {
            FrozenBase::Exact(base) => self.add_adapters(base),
            q => self.add_adapters(&q.dequantize()?),
        }
    }

    fn add_adapters(&self, base: &ModelParams) -> Result<ModelParams> {
        let delta = self.transforms.expand(&self.lambda)?;
        base.add(&delta)
    }

    /// Mean loss and mean `Λ`-gradient over microbatches. Each microbatch
    /// gradient is compressed before it is accumulated.
    pub fn adapter_gradient(&self, mlp: &Mlp, batches: &[Batch]) -> Result<(f64, Vector)> {
        if batches.is_empty() {
            return Err(Error::Config("adapter_gradient needs at least one batch".into()));
        }
        let params = self.materialize()?;
        let mut loss = 0.0;
        let mut acc = vec![0.0; self.lambda.len()];
        for b in batches {
            let (l, g) = mlp.loss_and_grad(&params, b)?;
            loss += l;
            for (a, x) in acc.iter_mut().zip(self.transforms.compress(&g)?.iter()) {
                *a += x;
            }
        }
        let k = batches.len() as f64;
        Ok((loss / k, acc.into_iter().map(|x| x / k).collect::<Vec<_>>().into()))
    }

    /// Folds `Sᵀ Λ` into the base, zeroes `Λ`, and installs `next`. A
    /// quantized base is dequantized, updated and re-quantized.
    pub fn merge_and_reset(&mut self, next: TransformAssignment) -> Result<MergeReport> {
        let merged = self.materialize()?;
        let report = match &mut self.base {
            FrozenBase::Exact(base) => {
                *base = merged;
                MergeReport::default()
            }
            FrozenBase::Quantized { quantizer, layers } => {
                let mut drift = 0.0f64;
                for (stored, exact) in layers.iter_mut().zip(&merged.layers) {
                    let w = quantizer.store(&exact.weight)?;
                    drift = drift.max(w.dequantize()?.sub(&exact.weight)?.max_abs());
                    stored.weight = w;
                    stored.bias = exact.bias.clone();
                }
                MergeReport { drift }
            }
        };
        if next.layers.len() != self.transforms.layers.len() {
            return Err(Error::shape("merge transforms", self.transforms.layers.len(), next.layers.len()));
        }
        self.lambda = Vector::zeros(next.compressed_dim());
        self.transforms = next;
        Ok(report)
    }
}

/// Loss and `Λ`-gradient of an adapter set over a quantized base, computed
/// against the dequantized weights.
pub fn quantized_adapter_forward(set: &AdapterSet, mlp: &Mlp, batch: &Batch) -> Result<(f64, Vector)> {
    set.adapter_gradient(mlp, std::slice::from_ref(batch))
}
