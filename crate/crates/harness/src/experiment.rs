//! End-to-end runs: train, calibrate, evaluate, build the query table.
//!
//! All randomness is derived from the config: the data order and
//! augmentation from `seed`, the configuration sampling from
//! `sampling.seed`, each on a per-epoch stream. Resuming from a checkpoint
//! therefore reproduces an uninterrupted run exactly.

use std::path::{Path, PathBuf};

use mutualnet::calibrate::BnStatsEntry;
use mutualnet::train::{multiscale_baseline_step, run_plan, CosineSchedule, TrainMetrics};
use mutualnet::{
    build_query_table, calibrate_all, evaluate_grid, sample_iteration_configs, AccuracyTable, Batch, BnStatsBank,
    ModelConfig, ModelSpec, QueryTable, Sgd, SlimNetwork,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, Checkpoint, Manifest};
use crate::config::{ExperimentConfig, TrainMode};
use crate::dataset::{self, epoch_order, Dataset};
use crate::error::{HarnessError, Result};

/// Stream offset separating the augmentation generator from the shuffle.
const AUGMENT_STREAM: u64 = 1 << 32;
/// Stream used to pick the calibration subset.
const CALIBRATION_STREAM: u64 = u64::MAX;

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: u64,
    pub epoch: u64,
    pub lr: f32,
    pub loss_full: f64,
    /// Sub-network losses in plan order, `;`-separated.
    pub loss_sub: String,
    pub total: f64,
    pub accuracy_full: f64,
}

impl MetricRow {
    fn new(epoch: u64, m: &TrainMetrics) -> Self {
        Self {
            iteration: m.iteration,
            epoch,
            lr: m.lr,
            loss_full: m.loss_full,
            loss_sub: m.loss_sub.iter().map(|l| format!("{l}")).collect::<Vec<_>>().join(";"),
            total: m.total,
            accuracy_full: m.accuracy.first().copied().unwrap_or(0.0),
        }
    }
}

fn save_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::format(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::format(path, e))?;
    artifacts::write_atomic(path, &bytes)
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::format(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| HarnessError::format(path, e))).collect()
}

/// Result of the training stage.
#[derive(Clone, Debug)]
pub struct Trained {
    pub net: SlimNetwork,
    pub metrics: Vec<MetricRow>,
    pub epochs_completed: u64,
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config_hash: String,
    pub model: ModelSpec,
    pub net: SlimNetwork,
    pub bank: BnStatsBank,
    pub accuracy: AccuracyTable,
    pub table: QueryTable,
    pub metrics: Vec<MetricRow>,
}

fn check_dataset(model: &ModelSpec, ds: &Dataset) -> Result<()> {
    if ds.classes != model.num_classes() {
        return Err(HarnessError::Config(format!(
            "dataset {} has {} classes but model {} predicts {}",
            ds.name,
            ds.classes,
            model.name,
            model.num_classes()
        )));
    }
    if ds.train.shape[0] != model.input_channels() {
        return Err(HarnessError::Config(format!(
            "dataset {} has {} input channels but model {} expects {}",
            ds.name,
            ds.train.shape[0],
            model.name,
            model.input_channels()
        )));
    }
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(HarnessError::Config(format!("dataset {} has an empty split", ds.name)));
    }
    Ok(())
}

fn write_run_files(cfg: &ExperimentConfig, hash: &str) -> Result<()> {
    let dir = &cfg.output_dir;
    artifacts::write_atomic(&dir.join(artifacts::CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let mut files: Vec<String> = std::fs::read_dir(dir)
        .map_err(HarnessError::io(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != artifacts::MANIFEST_FILE && !n.ends_with(".tmp"))
        .collect();
    files.sort();
    let epochs_completed = match Checkpoint::load(&dir.join(artifacts::CHECKPOINT_FILE), Some(hash)) {
        Ok(c) => c.epoch,
        Err(_) => 0,
    };
    artifacts::save_manifest(
        dir,
        &Manifest {
            version: artifacts::FORMAT_VERSION,
            name: cfg.name.clone(),
            mode: cfg.mode.name().into(),
            config_hash: hash.into(),
            epochs_completed,
            files,
        },
    )
}

/// Trains (or resumes) up to `stop_after` epochs, default all, writing a
/// checkpoint and the metrics log after every epoch.
pub fn train(cfg: &ExperimentConfig, ds: &Dataset, stop_after: Option<u64>) -> Result<Trained> {
    let model = cfg.model_spec()?;
    check_dataset(&model, ds)?;
    let hash = cfg.hash();
    let dir = &cfg.output_dir;
    let ckpt_path = dir.join(artifacts::CHECKPOINT_FILE);
    let metrics_path = dir.join(artifacts::METRICS_FILE);

    let mut opt = Sgd::new(cfg.optimizer.lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay);
    let (mut net, start, mut metrics) = if ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path, Some(&hash))?;
        if ck.net.spec() != &model {
            return Err(HarnessError::format(&ckpt_path, "checkpoint model differs from the configured model"));
        }
        log::info!("resuming {} from epoch {}", cfg.name, ck.epoch);
        opt.steps = ck.step;
        opt.set_velocity(ck.velocity);
        let mut rows = if metrics_path.exists() { load_metrics(&metrics_path)? } else { Vec::new() };
        rows.retain(|r| r.epoch < ck.epoch);
        (ck.net, ck.epoch, rows)
    } else {
        (SlimNetwork::new(model.clone(), cfg.seed)?, 0, Vec::new())
    };

    let n = ds.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let schedule = CosineSchedule {
        base_lr: cfg.optimizer.lr,
        total_steps: per_epoch * cfg.epochs,
        warmup_steps: per_epoch * cfg.optimizer.warmup_epochs,
    };
    let end = stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let base_res = [model.base_resolution];
    for epoch in start..end {
        let order = epoch_order(n, cfg.seed, epoch);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        aug_rng.set_stream(AUGMENT_STREAM + epoch);
        let mut plan_rng = ChaCha8Rng::seed_from_u64(cfg.sampling.seed);
        plan_rng.set_stream(epoch);
        for idx in order.chunks(cfg.batch_size) {
            let batch = ds.train.batch(idx, ds.augment.then_some(&mut aug_rng));
            opt.lr = schedule.lr_at(opt.steps);
            let m = match cfg.mode {
                TrainMode::Mutualnet => {
                    let plan = sample_iteration_configs(&cfg.sampling, &mut plan_rng)?;
                    run_plan(&mut net, &batch, &plan, &mut opt)?
                }
                TrainMode::MutualnetNoKl => {
                    let plan = sample_iteration_configs(&cfg.sampling, &mut plan_rng)?.with_label_supervised_subs();
                    run_plan(&mut net, &batch, &plan, &mut opt)?
                }
                TrainMode::Conventional => multiscale_baseline_step(&mut net, &batch, &base_res, &mut opt, &mut plan_rng)?,
                TrainMode::Multiscale => {
                    multiscale_baseline_step(&mut net, &batch, &cfg.sampling.resolution_set, &mut opt, &mut plan_rng)?
                }
            };
            metrics.push(MetricRow::new(epoch, &m));
        }
        let last = metrics.last().expect("at least one batch per epoch");
        log::info!(
            "{} epoch {}/{}: loss_full {:.4}, total {:.4}, lr {:.4}",
            cfg.name,
            epoch + 1,
            cfg.epochs,
            last.loss_full,
            last.total,
            last.lr
        );
        Checkpoint {
            config_hash: hash.clone(),
            net: net.clone(),
            epoch: epoch + 1,
            step: opt.steps,
            velocity: opt.velocity().cloned(),
        }
        .save(&ckpt_path)?;
        save_metrics(&metrics_path, &metrics)?;
    }
    write_run_files(cfg, &hash)?;
    Ok(Trained {
        net,
        metrics,
        epochs_completed: end.max(start),
    })
}

/// Seeded subset of the training split, without augmentation.
pub fn calibration_batches(cfg: &ExperimentConfig, ds: &Dataset) -> Vec<Batch> {
    let order = epoch_order(ds.train.len(), cfg.seed, CALIBRATION_STREAM);
    order
        .chunks(cfg.calibration.batch_size)
        .take(cfg.calibration.batches)
        .map(|idx| ds.train.batch(idx, None))
        .collect()
}

pub fn validation_batches(cfg: &ExperimentConfig, ds: &Dataset) -> Vec<Batch> {
    ds.val.sequential_batches(cfg.evaluation.batch_size)
}

/// Calibrates every configuration of the evaluation grid plus the full one.
pub fn calibrate_grid(cfg: &ExperimentConfig, net: &SlimNetwork, ds: &Dataset) -> Result<BnStatsBank> {
    let mut configs = cfg.eval_grid()?;
    let full = ModelConfig::full(net.spec());
    if !configs.iter().any(|c| c.key() == full.key()) {
        configs.push(full);
    }
    let data = calibration_batches(cfg, ds);
    Ok(calibrate_all(net, &configs, &data, cfg.calibration.batches)?)
}

/// Evaluates the grid with each configuration's own statistics.
pub fn evaluate(cfg: &ExperimentConfig, net: &SlimNetwork, bank: &BnStatsBank, ds: &Dataset) -> Result<AccuracyTable> {
    Ok(evaluate_grid(net, bank, &validation_batches(cfg, ds), &cfg.eval_grid()?)?)
}

/// Evaluates the grid with the full configuration's statistics sliced to
/// each sub-network, i.e. without per-configuration calibration.
pub fn evaluate_uncalibrated(
    cfg: &ExperimentConfig,
    net: &SlimNetwork,
    full_stats: &BnStatsEntry,
    ds: &Dataset,
) -> Result<AccuracyTable> {
    let grid = cfg.eval_grid()?;
    let mut bank = BnStatsBank::default();
    for c in &grid {
        bank.insert(c.key(), full_stats.sliced_for(net, c)?);
    }
    Ok(evaluate_grid(net, &bank, &validation_batches(cfg, ds), &grid)?)
}

/// Writes the bank, accuracy table, query table and cost table.
pub fn save_results(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    bank: &BnStatsBank,
    accuracy: &AccuracyTable,
    table: &QueryTable,
) -> Result<()> {
    let hash = cfg.hash();
    let dir = &cfg.output_dir;
    artifacts::save_bank(dir, bank, &hash)?;
    artifacts::save_accuracy(dir, accuracy, model, &hash)?;
    artifacts::save_query_table(&dir.join(artifacts::QUERY_TABLE_FILE), table)?;
    let costs = mutualnet::cost::cost_table(model, &cfg.eval_grid()?)?;
    artifacts::save_cost_table(&dir.join(artifacts::COST_FILE), &costs)?;
    write_run_files(cfg, &hash)
}

/// Full pipeline on an already loaded dataset.
pub fn run_with_dataset(cfg: &ExperimentConfig, ds: &Dataset) -> Result<RunArtifacts> {
    let model = cfg.model_spec()?;
    let trained = train(cfg, ds, None)?;
    let bank = calibrate_grid(cfg, &trained.net, ds)?;
    let accuracy = evaluate(cfg, &trained.net, &bank, ds)?;
    let table = build_query_table(&accuracy, &model)?;
    save_results(cfg, &model, &bank, &accuracy, &table)?;
    log::info!(
        "{}: {} configurations evaluated, {} on the query table",
        cfg.name,
        accuracy.rows.len(),
        table.entries().len()
    );
    Ok(RunArtifacts {
        dir: cfg.output_dir.clone(),
        config_hash: cfg.hash(),
        model,
        net: trained.net,
        bank,
        accuracy,
        table,
        metrics: trained.metrics,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let ds = dataset::load(&cfg.data)?;
    run_with_dataset(cfg, &ds)
}

/// Loads the trained network of a run directory, refusing a checkpoint
/// from a different config.
pub fn load_network(cfg: &ExperimentConfig) -> Result<SlimNetwork> {
    let ck = Checkpoint::load(&cfg.output_dir.join(artifacts::CHECKPOINT_FILE), Some(&cfg.hash()))?;
    Ok(ck.net)
}
