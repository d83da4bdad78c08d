//! Experiment configs: one JSON document per run.
//!
//! Relative paths inside a config resolve against the config's directory.
//! The top-level `seed` drives the task, the initialization, the transforms
//! and the distributed workers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{Architecture, ByteWidths, MemoryModel};
use crate::dist::DistConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    Batch, BatchSource, LayerSpec, Mlp, ModelParams, Nonlinearity, SyntheticTask, TaskKind, TaskSpec, Targets,
};
use crate::optim::OptimizerKind;
use crate::quant::DEFAULT_GROUP_SIZE;
use crate::rng::{stream_id, Rng};
use crate::trainer::{DecayPairing, ReloraMode, TrainConfig};
use crate::transform::TransformFamily;

const INIT_STREAM: u64 = 0x1217;
const DATASET_STREAM: u64 = 0xDA7A;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Synthetic(TaskSpec),
    Dataset(DatasetSpec),
}

/// A CSV file of numeric rows: `in_dim` inputs followed by the targets
/// (`out_dim` values for regression, one class index for classification).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub kind: TaskKind,
    pub in_dim: usize,
    #[serde(default)]
    pub out_dim: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub has_header: bool,
}

/// Hidden widths; input and output widths come from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    #[serde(default = "yes")]
    pub bias: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    Transformed,
    #[default]
    Adapter,
    Relora,
    ReloraFrozen,
}

impl TrainerKind {
    pub fn relora_mode(self) -> Option<ReloraMode> {
        match self {
            TrainerKind::Relora => Some(ReloraMode::TwoSided),
            TrainerKind::ReloraFrozen => Some(ReloraMode::FrozenProjector),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainerKind::Transformed => "transformed",
            TrainerKind::Adapter => "adapter",
            TrainerKind::Relora => "relora",
            TrainerKind::ReloraFrozen => "relora_frozen",
        }
    }
}

/// The matrix of dual runs checked by `verify-duality`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualityConfig {
    pub steps: usize,
    pub rank: usize,
    pub optimizers: Vec<OptimizerKind>,
    pub families: Vec<TransformFamily>,
    #[serde(default = "default_merges")]
    pub merge_every: Vec<usize>,
    #[serde(default = "default_pairings")]
    pub pairings: Vec<DecayPairing>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Allowed gap between the measured and predicted step-1 deviation of
    /// mismatched rows.
    #[serde(default = "default_step1_tolerance")]
    pub step1_tolerance: f64,
}

fn default_merges() -> Vec<usize> {
    vec![0]
}

fn default_pairings() -> Vec<DecayPairing> {
    vec![DecayPairing::None]
}

fn default_lambda() -> f64 {
    0.1
}

fn default_tolerance() -> f64 {
    1e-9
}

fn default_step1_tolerance() -> f64 {
    1e-12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub families: Vec<TransformFamily>,
    pub every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    /// `"200m"` or `"1.3b"`. Without a preset or architecture the config's
    /// MLP is estimated.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub architecture: Option<Architecture>,
    pub rank: usize,
    #[serde(default)]
    pub widths: ByteWidths,
    #[serde(default = "default_group")]
    pub group_size: usize,
    /// Empty means every table row.
    #[serde(default)]
    pub methods: Vec<String>,
}

fn default_group() -> usize {
    DEFAULT_GROUP_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub task: Option<TaskConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub trainer: TrainerKind,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub duality: Option<DualityConfig>,
    #[serde(default)]
    pub distributed: Option<DistConfig>,
    #[serde(default)]
    pub analysis: Option<AnalysisConfig>,
    #[serde(default)]
    pub memory: Option<MemoryConfig>,
    /// Directory the config was loaded from.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref().ok_or_else(|| Error::Config(format!("missing section `{name}`")))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(t) = &cfg.train {
            if t.seed != 0 {
                return Err(Error::Config("set `seed` at the top level, not in `train`".into()));
            }
        }
        if let Some(d) = &cfg.distributed {
            if d.seed != 0 {
                return Err(Error::Config("set `seed` at the top level, not in `distributed`".into()));
            }
        }
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn task(&self) -> Result<Task> {
        match section(&self.task, "task")? {
            TaskConfig::Synthetic(spec) => Ok(Task::Synthetic(SyntheticTask::new(self.seed, spec.clone())?)),
            TaskConfig::Dataset(spec) => Ok(Task::Dataset(CsvDataset::load(&self.resolve(&spec.path), spec, self.seed)?)),
        }
    }

    pub fn mlp(&self, task: &Task) -> Result<Mlp> {
        let m = section(&self.model, "model")?;
        let (in_dim, out_dim) = task.dims();
        let mut widths = vec![in_dim];
        widths.extend(&m.hidden);
        widths.push(out_dim);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let nl = if i + 1 == n { Nonlinearity::Identity } else { m.nonlinearity };
                LayerSpec::new(widths[i], widths[i + 1], nl, m.bias)
            })
            .collect();
        Mlp::new(layers, task.loss())
    }

    pub fn init_params(&self, mlp: &Mlp) -> ModelParams {
        mlp.init_params(&mut Rng::new(self.seed, INIT_STREAM))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = section(&self.train, "train")?.clone();
        t.seed = self.seed;
        t.validate()?;
        Ok(t)
    }

    pub fn duality(&self) -> Result<&DualityConfig> {
        section(&self.duality, "duality")
    }

    pub fn dist_config(&self) -> Result<DistConfig> {
        let mut d = section(&self.distributed, "distributed")?.clone();
        d.seed = self.seed;
        Ok(d)
    }

    pub fn analysis(&self) -> Result<&AnalysisConfig> {
        section(&self.analysis, "analysis")
    }

    pub fn memory_model(&self) -> Result<MemoryModel> {
        let m = section(&self.memory, "memory")?;
        let mut mm = match (&m.preset, &m.architecture) {
            (Some(_), Some(_)) => return Err(Error::Config("memory: give `preset` or `architecture`, not both".into())),
            (Some(p), None) => MemoryModel::for_architecture(&Architecture::preset(p)?, m.rank),
            (None, Some(a)) => MemoryModel::for_architecture(a, m.rank),
            (None, None) => {
                let task = self.task()?;
                MemoryModel::for_mlp(&self.mlp(&task)?.layers, m.rank)
            }
        };
        if m.group_size == 0 {
            return Err(Error::Config("memory: group_size must be >= 1".into()));
        }
        mm.widths = m.widths;
        mm.group_size = m.group_size;
        Ok(mm)
    }

    /// Config-relative `output_dir`, else `runs/<stem>` beside the config.
    pub fn default_output(&self, config_path: &Path) -> PathBuf {
        match &self.output_dir {
            Some(p) => self.resolve(p),
            None => {
                let stem = config_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                self.base_dir.join("runs").join(stem)
            }
        }
    }
}

/// Rows of a CSV file, sampled with replacement per batch.
#[derive(Clone, Debug)]
pub struct CsvDataset {
    pub inputs: Matrix,
    pub targets: Targets,
    pub batch_size: usize,
    out_dim: usize,
    seed: u64,
}

impl CsvDataset {
    pub fn load(path: &Path, spec: &DatasetSpec, seed: u64) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read dataset {}: {e}", path.display())))?;
        Self::parse(&text, spec, seed)
    }

    pub fn parse(text: &str, spec: &DatasetSpec, seed: u64) -> Result<Self> {
        let target_cols = match spec.kind {
            TaskKind::Regression => spec.out_dim,
            TaskKind::Classification { .. } => 1,
        };
        let width = spec.in_dim + target_cols;
        if spec.in_dim == 0 || target_cols == 0 || spec.batch_size == 0 {
            return Err(Error::Config("dataset dimensions must be positive".into()));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, line) in text.lines().enumerate().skip(spec.has_header as usize) {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("dataset line {}: {e}", i + 1)))?;
            if row.len() != width {
                return Err(Error::Config(format!(
                    "dataset line {}: expected {width} columns, found {}",
                    i + 1,
                    row.len()
                )));
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        let n = rows.len();
        let inputs = Matrix::from_fn(spec.in_dim, n, |i, j| rows[j][i]);
        let (targets, out_dim) = match spec.kind {
            TaskKind::Regression => (
                Targets::Values(Matrix::from_fn(spec.out_dim, n, |i, j| rows[j][spec.in_dim + i])),
                spec.out_dim,
            ),
            TaskKind::Classification { classes } => {
                let labels = rows
                    .iter()
                    .enumerate()
                    .map(|(j, r)| {
                        let v = r[spec.in_dim];
                        if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                            Ok(v as usize)
                        } else {
                            Err(Error::Config(format!("dataset row {}: label {v} not in 0..{classes}", j + 1)))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                (Targets::Labels(labels), classes)
            }
        };
        Ok(CsvDataset {
            inputs,
            targets,
            batch_size: spec.batch_size,
            out_dim,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Batch {
        let inputs = Matrix::from_fn(self.inputs.rows(), idx.len(), |i, j| self.inputs[(i, idx[j])]);
        let targets = match &self.targets {
            Targets::Values(t) => Targets::Values(Matrix::from_fn(t.rows(), idx.len(), |i, j| t[(i, idx[j])])),
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&j| l[j]).collect()),
        };
        Batch { inputs, targets }
    }
}

impl BatchSource for CsvDataset {
    fn batch(&self, shard: u64, index: u64) -> Batch {
        let mut rng = Rng::new(self.seed, stream_id(&[DATASET_STREAM, shard, index]));
        let idx: Vec<usize> = (0..self.batch_size).map(|_| rng.below(self.len())).collect();
        self.select(&idx)
    }
}

pub enum Task {
    Synthetic(SyntheticTask),
    Dataset(CsvDataset),
}

impl Task {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Task::Synthetic(t) => (t.spec.in_dim, t.spec.outputs()),
            Task::Dataset(d) => (d.inputs.rows(), d.out_dim),
        }
    }

    pub fn loss(&self) -> crate::model::LossKind {
        match self {
            Task::Synthetic(t) => t.spec.loss(),
            Task::Dataset(d) => match d.targets {
                Targets::Values(_) => crate::model::LossKind::Mse,
                Targets::Labels(_) => crate::model::LossKind::CrossEntropy,
            },
        }
    }

    /// Held-out batch for synthetic tasks; the whole file for datasets.
    pub fn eval_batch(&self, size: usize) -> Batch {
        match self {
            Task::Synthetic(t) => t.eval_batch(size),
            Task::Dataset(d) => d.select(&(0..d.len()).collect::<Vec<_>>()),
        }
    }
}

impl BatchSource for Task {
    fn batch(&self, shard: u64, index: u64) -> Batch {
        match self {
            Task::Synthetic(t) => t.batch(shard, index),
            Task::Dataset(d) => d.batch(shard, index),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 3,
        "task": {"synthetic": {"kind": {"kind": "regression"}, "in_dim": 4, "out_dim": 2, "batch_size": 8}},
        "model": {"hidden": [6], "nonlinearity": "tanh"},
        "train": {"steps": 5, "optimizer": {"kind": "adam", "lr": 0.01}, "transform": {"family": "gaussian", "rank": 2}}
    }"#;

    #[test]
    fn minimal_config_builds() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let task = cfg.task().unwrap();
        let mlp = cfg.mlp(&task).unwrap();
        assert_eq!(mlp.in_dim(), 4);
        assert_eq!(mlp.out_dim(), 2);
        assert_eq!(cfg.train_config().unwrap().seed, 3);
        assert_eq!(cfg.trainer, TrainerKind::Adapter);
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace(r#""steps": 5, "#, "");
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("steps"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = MINIMAL.replace(r#""seed": 3,"#, r#""seed": 3, "sede": 4,"#);
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("sede"), "{err}");
    }

    #[test]
    fn missing_section_is_named() {
        let cfg = ExperimentConfig::from_json(r#"{"seed": 1}"#).unwrap();
        assert!(cfg.task().err().unwrap().to_string().contains("`task`"));
        assert!(cfg.memory_model().err().unwrap().to_string().contains("`memory`"));
    }

    #[test]
    fn warmup_rides_along_with_the_optimizer() {
        let text = MINIMAL.replace(r#""lr": 0.01}"#, r#""lr": 0.01, "warmup_steps": 3}"#);
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(cfg.train_config().unwrap().optimizer.warmup_steps, 3);
    }

    #[test]
    fn csv_dataset_batches_are_deterministic() {
        let spec = DatasetSpec {
            path: "unused".into(),
            kind: TaskKind::Classification { classes: 3 },
            in_dim: 2,
            out_dim: 0,
            batch_size: 4,
            has_header: true,
        };
        let text = "x,y,label\n0.1,0.2,0\n0.3,0.4,2\n-1,1,1\n";
        let d = CsvDataset::parse(text, &spec, 9).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.batch(0, 5), d.batch(0, 5));
        assert_eq!(d.batch(0, 5).size(), 4);
        assert!(CsvDataset::parse("0.1,0.2,3\n", &DatasetSpec { has_header: false, ..spec }, 0).is_err());
    }
}
