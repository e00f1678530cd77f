//! The CIFAR-10 desk experiment: one shared recipe trained four ways,
//! summarized into a single JSON file that the acceptance suite reads.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mutualnet::{AccuracyTable, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::artifacts::write_atomic;
use crate::config::{cifar_recipe, DataConfig, TrainMode};
use crate::dataset;
use crate::error::{HarnessError, Result};
use crate::experiment::{evaluate_uncalibrated, run_with_dataset};

pub const SUMMARY_FILE: &str = "desk_summary.json";
pub const DESK_DIR_ENV: &str = "MUTUALNET_DESK_DIR";
pub const SUMMARY_VERSION: u32 = 1;

pub const DESK_MODES: [TrainMode; 4] = [
    TrainMode::Mutualnet,
    TrainMode::MutualnetNoKl,
    TrainMode::Conventional,
    TrainMode::Multiscale,
];

#[derive(Clone, Debug)]
pub struct DeskOptions {
    pub epochs: u64,
    pub data: DataConfig,
    pub width_step: f64,
    pub modes: Vec<TrainMode>,
}

impl Default for DeskOptions {
    fn default() -> Self {
        Self {
            epochs: 60,
            data: DataConfig::Cifar10 {
                path: None,
                download: true,
                augment: true,
                train_limit: 0,
            },
            width_step: 0.05,
            modes: DESK_MODES.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredConfig {
    pub width: f64,
    pub resolution: u32,
    pub frames: u32,
    pub accuracy: f64,
}

fn scored(t: &AccuracyTable) -> Vec<ScoredConfig> {
    t.rows
        .iter()
        .map(|r| ScoredConfig {
            width: r.config.width,
            resolution: r.config.resolution,
            frames: r.config.frames,
            accuracy: r.accuracy,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskRun {
    pub config_hash: String,
    pub dir: PathBuf,
    pub epochs: u64,
    /// Per-configuration calibrated accuracy.
    pub accuracy: Vec<ScoredConfig>,
    /// Accuracy when every configuration reuses the full configuration's
    /// statistics, sliced to its channels.
    pub uncalibrated: Vec<ScoredConfig>,
}

impl DeskRun {
    pub fn accuracy_at(&self, width: f64, resolution: u32) -> Option<f64> {
        find(&self.accuracy, width, resolution)
    }

    pub fn uncalibrated_at(&self, width: f64, resolution: u32) -> Option<f64> {
        find(&self.uncalibrated, width, resolution)
    }
}

fn find(rows: &[ScoredConfig], width: f64, resolution: u32) -> Option<f64> {
    let key = ModelConfig::new(width, resolution).key();
    rows.iter()
        .find(|r| ModelConfig::with_frames(r.width, r.resolution, r.frames).key() == key)
        .map(|r| r.accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskSummary {
    pub version: u32,
    pub dataset: String,
    pub epochs: u64,
    pub model: String,
    pub width_bounds: [f64; 2],
    pub resolutions: Vec<u32>,
    /// Keyed by training mode name.
    pub runs: BTreeMap<String, DeskRun>,
}

impl DeskSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
        serde_json::from_slice(&bytes).map_err(|e| HarnessError::format(path, e))
    }

    pub fn run(&self, mode: TrainMode) -> Option<&DeskRun> {
        self.runs.get(mode.name())
    }
}

/// Trains every requested mode into `out/<mode>` (resuming where
/// checkpoints exist) and writes `out/desk_summary.json`.
pub fn run_desk(out: &Path, opts: &DeskOptions) -> Result<DeskSummary> {
    let ds = dataset::load(&opts.data)?;
    let mut runs = BTreeMap::new();
    let mut template = None;
    for &mode in &opts.modes {
        let mut cfg = cifar_recipe(mode, out.join(mode.name()));
        cfg.epochs = opts.epochs;
        cfg.data = opts.data.clone();
        cfg.evaluation.width_step = opts.width_step;
        log::info!("desk: training {} for {} epochs", mode.name(), cfg.epochs);
        let art = run_with_dataset(&cfg, &ds)?;
        let full = ModelConfig::full(&art.model);
        let full_stats = art
            .bank
            .get(&full)
            .ok_or_else(|| HarnessError::Config("full configuration missing from the calibration bank".into()))?;
        let uncal = evaluate_uncalibrated(&cfg, &art.net, full_stats, &ds)?;
        runs.insert(
            mode.name().to_string(),
            DeskRun {
                config_hash: art.config_hash.clone(),
                dir: art.dir.clone(),
                epochs: cfg.epochs,
                accuracy: scored(&art.accuracy),
                uncalibrated: scored(&uncal),
            },
        );
        template.get_or_insert(cfg);
    }
    let cfg = template.ok_or_else(|| HarnessError::Config("no desk modes requested".into()))?;
    let summary = DeskSummary {
        version: SUMMARY_VERSION,
        dataset: ds.name.clone(),
        epochs: opts.epochs,
        model: cfg.model_spec()?.name,
        width_bounds: [cfg.sampling.width_lower, cfg.sampling.width_upper],
        resolutions: cfg.sampling.resolution_set.clone(),
        runs,
    };
    write_atomic(
        &out.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary).expect("summary serializes").as_bytes(),
    )?;
    Ok(summary)
}
