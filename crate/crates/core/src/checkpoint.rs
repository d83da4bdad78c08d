//! Checkpoint directories: `manifest.json` plus one raw little-endian file
//! per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{LayerParams, LayerSpec, ModelParams};
use crate::optim::OptimizerState;
use crate::quant::{QuantizedTensor, StoredWeight};
use crate::reparam::FrozenBase;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "dualtrain-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F64,
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn dtype(&self) -> Dtype {
        match self {
            TensorData::F64(_) => Dtype::F64,
            TensorData::U8(_) => Dtype::U8,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    /// Matrices are stored column-major.
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, TensorData)>,
}

impl Checkpoint {
    pub fn new(step: u64) -> Self {
        Checkpoint {
            step,
            meta: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?} does not match {} elements", data.len())));
        }
        if !valid_name(&name) {
            return Err(Error::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        if self.tensors.iter().any(|(n, ..)| *n == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        self.tensors.push((name, shape, data));
        Ok(())
    }

    pub fn push_params(&mut self, prefix: &str, params: &ModelParams) -> Result<()> {
        for (l, layer) in params.layers.iter().enumerate() {
            let (r, c) = layer.weight.shape();
            self.push(format!("{prefix}layer{l}.weight"), vec![r, c], TensorData::F64(layer.weight.as_slice().to_vec()))?;
            if let Some(b) = &layer.bias {
                self.push(format!("{prefix}layer{l}.bias"), vec![b.len()], TensorData::F64(b.clone()))?;
            }
        }
        Ok(())
    }

    pub fn push_optimizer(&mut self, state: &OptimizerState) -> Result<()> {
        for (i, m) in state.moment_slices().iter().enumerate() {
            self.push(format!("optimizer.moment{i}"), vec![m.len()], TensorData::F64(m.to_vec()))?;
        }
        Ok(())
    }

    /// Quantized layers are written as their codes and scales.
    pub fn push_base(&mut self, base: &FrozenBase) -> Result<()> {
        match base {
            FrozenBase::Exact(p) => self.push_params("base.", p),
            FrozenBase::Quantized { layers, .. } => {
                for (l, layer) in layers.iter().enumerate() {
                    match &layer.weight {
                        StoredWeight::Raw(m) => {
                            self.push(format!("base.layer{l}.weight"), vec![m.rows(), m.cols()], TensorData::F64(m.as_slice().to_vec()))?
                        }
                        StoredWeight::Quantized(q) => push_quantized(self, &format!("base.layer{l}.weight"), q)?,
                    }
                    if let Some(b) = &layer.bias {
                        self.push(format!("base.layer{l}.bias"), vec![b.len()], TensorData::F64(b.clone()))?;
                    }
                }
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &TensorData)> {
        self.tensors.iter().find(|(n, ..)| n == name).map(|(_, s, d)| (s.as_slice(), d))
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name) {
            Some((_, TensorData::F64(v))) => Ok(v),
            Some(_) => Err(Error::Checkpoint(format!("{name} is not f64"))),
            None => Err(Error::Checkpoint(format!("missing tensor {name}"))),
        }
    }

    /// Rebuilds parameters written by [`Checkpoint::push_params`].
    pub fn params(&self, prefix: &str, specs: &[LayerSpec]) -> Result<ModelParams> {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let (r, c) = s.weight_shape();
                let w = self.f64s(&format!("{prefix}layer{l}.weight"))?;
                let weight = Matrix::from_col_major(r, c, w.to_vec())
                    .map_err(|_| Error::Checkpoint(format!("layer{l}.weight has the wrong size")))?;
                let bias = if s.has_bias {
                    let b = self.f64s(&format!("{prefix}layer{l}.bias"))?;
                    if b.len() != s.out_dim {
                        return Err(Error::Checkpoint(format!("layer{l}.bias has the wrong size")));
                    }
                    Some(b.to_vec())
                } else {
                    None
                };
                Ok(LayerParams { weight, bias })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams { layers })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, shape, data) in &self.tensors {
            let file = format!("{name}.bin");
            fs::write(dir.join(&file), data.to_le_bytes())?;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: data.dtype(),
                shape: shape.clone(),
                file,
            });
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            version: VERSION,
            step: self.step,
            meta: self.meta.clone(),
            tensors: entries,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut ckpt = Checkpoint {
            step: manifest.step,
            meta: manifest.meta,
            tensors: Vec::new(),
        };
        for e in manifest.tensors {
            if !valid_name(&e.name) || e.file != format!("{}.bin", e.name) {
                return Err(Error::Checkpoint(format!("bad tensor entry {:?}", e.name)));
            }
            let bytes = fs::read(dir.join(&e.file))?;
            let n: usize = e.shape.iter().product();
            if bytes.len() != n * e.dtype.width() {
                return Err(Error::Checkpoint(format!(
                    "{}: expected {} bytes, found {}",
                    e.name,
                    n * e.dtype.width(),
                    bytes.len()
                )));
            }
            let data = match e.dtype {
                Dtype::F64 => TensorData::F64(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect(),
                ),
                Dtype::U8 => TensorData::U8(bytes),
            };
            ckpt.push(e.name, e.shape, data)?;
        }
        Ok(ckpt)
    }
}

fn push_quantized(ckpt: &mut Checkpoint, name: &str, q: &QuantizedTensor) -> Result<()> {
    ckpt.push(format!("{name}.codes"), vec![q.rows, q.cols], TensorData::U8(q.codes.clone()))?;
    ckpt.push(format!("{name}.scales"), vec![q.scales.len()], TensorData::F64(q.scales.clone()))
}

/// Keeps tensor files inside the checkpoint directory.
fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}
