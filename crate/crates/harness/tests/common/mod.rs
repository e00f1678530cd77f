#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mutualnet::SamplingSpec;
use mutualnet_harness::config::{
    CalibrationConfig, DataConfig, EvalConfig, ExperimentConfig, ModelSource, OptimizerConfig, TrainMode,
};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Two-class synthetic run of `epochs` epochs on the 16×16 blob model.
pub fn synthetic_config(dir: &Path, mode: TrainMode, epochs: u64) -> ExperimentConfig {
    ExperimentConfig {
        name: format!("test_{}", mode.name()),
        mode,
        model: ModelSource::Path(repo_root().join("models/blob_net.json")),
        sampling: SamplingSpec {
            width_lower: 0.5,
            width_upper: 1.0,
            n_random: 2,
            resolution_set: vec![16, 12],
            temporal_set: vec![1],
            seed: 7,
        },
        optimizer: OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 1,
        },
        data: DataConfig::Synthetic {
            classes: 2,
            train: 96,
            val: 48,
            resolution: 16,
            noise: 0.5,
            seed: 3,
        },
        epochs,
        batch_size: 16,
        seed: 1,
        output_dir: dir.to_path_buf(),
        calibration: CalibrationConfig {
            batches: 3,
            batch_size: 32,
        },
        evaluation: EvalConfig {
            width_step: 0.25,
            ..Default::default()
        },
    }
}
