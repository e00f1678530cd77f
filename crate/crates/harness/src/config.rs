//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use mutualnet::{archs, ModelSpec, SamplingSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// How the network is trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Sandwich sampling with distillation from the full network.
    #[default]
    Mutualnet,
    /// Sandwich sampling with every sub-network trained on the labels.
    MutualnetNoKl,
    /// Full width at the base resolution only.
    Conventional,
    /// Full width at one randomly drawn resolution per iteration.
    Multiscale,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mutualnet => "mutualnet",
            Self::MutualnetNoKl => "mutualnet_no_kl",
            Self::Conventional => "conventional",
            Self::Multiscale => "multiscale",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// One of the built-in reference architectures.
    Builtin(String),
    /// A ModelSpec JSON file, relative to the config file.
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default)]
    pub warmup_epochs: u64,
}

fn default_momentum() -> f32 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// CIFAR-10 binary batches. `path` defaults to the cache directory.
    Cifar10 {
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default = "default_true")]
        download: bool,
        #[serde(default = "default_true")]
        augment: bool,
        /// Use only the first `n` training images (0 = all).
        #[serde(default)]
        train_limit: usize,
    },
    /// Gaussian blobs around per-class prototype images.
    Synthetic {
        classes: usize,
        train: usize,
        val: usize,
        resolution: usize,
        #[serde(default = "default_noise")]
        noise: f32,
        #[serde(default)]
        seed: u64,
    },
}

fn default_true() -> bool {
    true
}

fn default_noise() -> f32 {
    1.0
}

impl DataConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Cifar10 { .. } => "cifar10",
            Self::Synthetic { .. } => "synthetic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default = "default_calib_batches")]
    pub batches: usize,
    #[serde(default = "default_calib_batch_size")]
    pub batch_size: usize,
}

fn default_calib_batches() -> usize {
    mutualnet::calibrate::DEFAULT_CALIBRATION_BATCHES
}

fn default_calib_batch_size() -> usize {
    64
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            batches: default_calib_batches(),
            batch_size: default_calib_batch_size(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_width_step")]
    pub width_step: f64,
    /// Defaults to the training resolution set.
    #[serde(default)]
    pub resolutions: Vec<u32>,
    /// Defaults to the training temporal set.
    #[serde(default)]
    pub frames: Vec<u32>,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

fn default_width_step() -> f64 {
    0.05
}

fn default_eval_batch() -> usize {
    256
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            width_step: default_width_step(),
            resolutions: Vec::new(),
            frames: Vec::new(),
            batch_size: default_eval_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub mode: TrainMode,
    pub model: ModelSource,
    pub sampling: SamplingSpec,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub epochs: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
}

impl ExperimentConfig {
    /// Reads a TOML config. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| HarnessError::format(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let ModelSource::Path(p) = &mut cfg.model {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let DataConfig::Cifar10 { path: Some(p), .. } = &mut cfg.data {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HarnessError::Config("epochs and batch_size must be positive".into()));
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 {
            return Err(HarnessError::Config("optimizer.lr must be positive".into()));
        }
        if self.calibration.batches == 0 || self.calibration.batch_size == 0 {
            return Err(HarnessError::Config("calibration needs at least one non-empty batch".into()));
        }
        let model = self.model_spec()?;
        self.sampling.validate_for(&model)?;
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        match &self.model {
            ModelSource::Builtin(name) => builtin_model(name)
                .ok_or_else(|| HarnessError::Config(format!("unknown builtin model {name:?}; known: {BUILTIN_MODELS:?}"))),
            ModelSource::Path(p) => {
                let text = std::fs::read_to_string(p).map_err(HarnessError::io(p))?;
                Ok(ModelSpec::from_json(&text)?)
            }
        }
    }

    /// Identity of everything that influences the produced artifacts. The
    /// output directory is excluded so that runs can be moved.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
            if let Ok(spec) = self.model_spec() {
                o.insert("model".into(), serde_json::to_value(spec).expect("spec serializes"));
            }
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Evaluation grid: trained width range × resolutions × frames.
    pub fn eval_grid(&self) -> Result<Vec<mutualnet::ModelConfig>> {
        let model = self.model_spec()?;
        let res = if self.evaluation.resolutions.is_empty() {
            &self.sampling.resolution_set
        } else {
            &self.evaluation.resolutions
        };
        let frames = if self.evaluation.frames.is_empty() {
            &self.sampling.temporal_set
        } else {
            &self.evaluation.frames
        };
        let mut bounded = model.clone();
        bounded.width_bounds = [self.sampling.width_lower, self.sampling.width_upper];
        Ok(mutualnet::enumerate_configs(&bounded, self.evaluation.width_step, res, frames)?)
    }
}

pub const BUILTIN_MODELS: [&str; 3] = ["mobilenet_v1", "cifar_convnet", "tiny_slow3d"];

pub fn builtin_model(name: &str) -> Option<ModelSpec> {
    match name {
        "mobilenet_v1" => Some(archs::mobilenet_v1()),
        "cifar_convnet" => Some(archs::cifar_convnet()),
        "tiny_slow3d" => Some(archs::tiny_slow3d()),
        _ => None,
    }
}

/// Training resolution set used with a builtin model: the four ImageNet
/// sizes for MobileNet, the four CIFAR sizes for the desk ConvNet, and the
/// base resolution alone otherwise.
pub fn default_resolution_set(model: &ModelSpec) -> Vec<u32> {
    match model.name.as_str() {
        "mobilenet_v1" => vec![224, 192, 160, 128],
        "cifar_convnet" => vec![32, 28, 24, 20],
        _ => vec![model.base_resolution],
    }
}

/// The CIFAR-10 desk recipe for one training mode.
pub fn cifar_recipe(mode: TrainMode, output_dir: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        name: format!("cifar_{}", mode.name()),
        mode,
        model: ModelSource::Builtin("cifar_convnet".into()),
        sampling: SamplingSpec {
            width_lower: 0.5,
            width_upper: 1.0,
            n_random: 2,
            resolution_set: vec![32, 28, 24, 20],
            temporal_set: vec![1],
            seed: 0,
        },
        optimizer: OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 1,
        },
        data: DataConfig::Cifar10 {
            path: None,
            download: true,
            augment: true,
            train_limit: 0,
        },
        epochs: 60,
        batch_size: 128,
        seed: 0,
        output_dir,
        calibration: CalibrationConfig::default(),
        evaluation: EvalConfig::default(),
    }
}
