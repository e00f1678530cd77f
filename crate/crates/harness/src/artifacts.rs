//! On-disk formats. Every writer goes through [`write_atomic`]; every
//! artifact records the hash of the config that produced it.

use std::io::Write;
use std::path::{Path, PathBuf};

use mutualnet::calibrate::{BnLayerStats, BnStatsEntry};
use mutualnet::cost::CostRow;
use mutualnet::deploy::{AccuracyRow, QueryEntry};
use mutualnet::slim::Params;
use mutualnet::{AccuracyTable, BnStatsBank, ModelConfig, ModelSpec, QueryTable, SlimNetwork};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MNETCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const BANK_INDEX_FILE: &str = "bn_stats.json";
pub const BANK_DATA_FILE: &str = "bn_stats.bin";
pub const ACCURACY_JSON_FILE: &str = "accuracy.json";
pub const ACCURACY_CSV_FILE: &str = "accuracy.csv";
pub const QUERY_TABLE_FILE: &str = "query_table.csv";
pub const COST_FILE: &str = "cost.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "run.json";

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(HarnessError::io(&tmp))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(HarnessError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(HarnessError::io(path))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(HarnessError::io(path))
}

fn check_hash(path: &Path, expected: Option<&str>, found: &str) -> Result<()> {
    match expected {
        Some(e) if e != found => Err(HarnessError::HashMismatch {
            artifact: path.to_path_buf(),
            expected: e.into(),
            found: found.into(),
        }),
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config_hash: String,
    spec: ModelSpec,
    /// Completed epochs.
    epoch: u64,
    /// Optimizer steps taken.
    step: u64,
    /// `[weight, bias, bn_scale, bn_shift]` lengths per layer.
    tensors: Vec<[usize; 4]>,
    has_velocity: bool,
}

/// Full-width parameters plus the optimizer state needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub net: SlimNetwork,
    pub epoch: u64,
    pub step: u64,
    pub velocity: Option<Params<f32>>,
}

fn push_params(out: &mut Vec<u8>, p: &Params<f32>) {
    for l in &p.layers {
        for t in l.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn fill_params(p: &mut Params<f32>, bytes: &mut &[u8]) -> bool {
    for l in &mut p.layers {
        for t in l.tensors_mut() {
            if bytes.len() < 4 * t.len() {
                return false;
            }
            for (v, b) in t.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
            *bytes = &bytes[4 * t.len()..];
        }
    }
    true
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let params = self.net.params();
        let header = CheckpointHeader {
            version: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            spec: self.net.spec().clone(),
            epoch: self.epoch,
            step: self.step,
            tensors: params.layers.iter().map(|l| l.tensors().map(Vec::len)).collect(),
            has_velocity: self.velocity.is_some(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + json.len() + 8 * params.numel());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        push_params(&mut out, params);
        if let Some(v) = &self.velocity {
            push_params(&mut out, v);
        }
        write_atomic(path, &out)
    }

    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let bytes = read(path)?;
        let bad = |d: &str| HarnessError::format(path, d);
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a mutualnet checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        check_hash(path, expected_hash, &header.config_hash)?;
        header.spec.validate()?;
        let mut params = SlimNetwork::new(header.spec.clone(), 0)?.params().clone();
        let layout: Vec<[usize; 4]> = params.layers.iter().map(|l| l.tensors().map(Vec::len)).collect();
        if layout != header.tensors {
            return Err(bad("tensor layout does not match the stored model spec"));
        }
        let mut rest = &bytes[20 + hlen..];
        if !fill_params(&mut params, &mut rest) {
            return Err(bad("truncated parameters"));
        }
        let velocity = if header.has_velocity {
            let mut v = Params::zeros_like(&params);
            if !fill_params(&mut v, &mut rest) {
                return Err(bad("truncated optimizer state"));
            }
            Some(v)
        } else {
            None
        };
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config_hash: header.config_hash,
            net: SlimNetwork::from_params(header.spec, params)?,
            epoch: header.epoch,
            step: header.step,
            velocity,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BankLayerIndex {
    /// Position in the data file, in f64 elements; means then variances.
    offset: usize,
    channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BankEntryIndex {
    key: String,
    width: f64,
    resolution: u32,
    frames: u32,
    batches: usize,
    samples: usize,
    layers: Vec<Option<BankLayerIndex>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BankIndex {
    version: u32,
    config_hash: String,
    data_file: String,
    entries: Vec<BankEntryIndex>,
}

/// Writes `bn_stats.json` (keyed index) and `bn_stats.bin` (little-endian
/// f64 arrays) into `dir`.
pub fn save_bank(dir: &Path, bank: &BnStatsBank, config_hash: &str) -> Result<()> {
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut entries = Vec::with_capacity(bank.len());
    for (key, entry) in bank.iter() {
        let layers = entry
            .layers
            .iter()
            .map(|l| {
                l.as_ref().map(|s| {
                    for v in s.mean.iter().chain(&s.var) {
                        data.extend_from_slice(&v.to_le_bytes());
                    }
                    let idx = BankLayerIndex {
                        offset,
                        channels: s.mean.len(),
                    };
                    offset += 2 * s.mean.len();
                    idx
                })
            })
            .collect();
        entries.push(BankEntryIndex {
            key: key.to_string(),
            width: key.width(),
            resolution: key.resolution,
            frames: key.frames,
            batches: entry.batches,
            samples: entry.samples,
            layers,
        });
    }
    let index = BankIndex {
        version: FORMAT_VERSION,
        config_hash: config_hash.into(),
        data_file: BANK_DATA_FILE.into(),
        entries,
    };
    write_atomic(&dir.join(BANK_DATA_FILE), &data)?;
    write_atomic(
        &dir.join(BANK_INDEX_FILE),
        serde_json::to_string_pretty(&index).expect("index serializes").as_bytes(),
    )
}

pub fn load_bank(dir: &Path, expected_hash: Option<&str>) -> Result<BnStatsBank> {
    let ipath = dir.join(BANK_INDEX_FILE);
    let index: BankIndex = serde_json::from_slice(&read(&ipath)?).map_err(|e| HarnessError::format(&ipath, e))?;
    if index.version != FORMAT_VERSION {
        return Err(HarnessError::format(&ipath, format!("unsupported bank version {}", index.version)));
    }
    check_hash(&ipath, expected_hash, &index.config_hash)?;
    let dpath = dir.join(&index.data_file);
    let raw = read(&dpath)?;
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let mut bank = BnStatsBank::default();
    for e in index.entries {
        let layers = e
            .layers
            .iter()
            .map(|l| {
                l.as_ref()
                    .map(|l| {
                        let s = values
                            .get(l.offset..l.offset + 2 * l.channels)
                            .ok_or_else(|| HarnessError::format(&dpath, format!("entry {} overruns the data file", e.key)))?;
                        Ok(BnLayerStats {
                            mean: s[..l.channels].to_vec(),
                            var: s[l.channels..].to_vec(),
                        })
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = ModelConfig::with_frames(e.width, e.resolution, e.frames);
        bank.insert(
            cfg.key(),
            BnStatsEntry {
                layers,
                batches: e.batches,
                samples: e.samples,
            },
        );
    }
    Ok(bank)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AccuracyFile {
    version: u32,
    config_hash: String,
    split: String,
    samples: usize,
    rows: Vec<AccuracyRecord>,
}

/// One CSV row of an accuracy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub width: f64,
    pub resolution: u32,
    pub frames: u32,
    pub flops: u64,
    pub accuracy: f64,
}

fn accuracy_records(acc: &AccuracyTable, model: &ModelSpec) -> Result<Vec<AccuracyRecord>> {
    acc.rows
        .iter()
        .map(|r| {
            Ok(AccuracyRecord {
                width: r.config.width,
                resolution: r.config.resolution,
                frames: r.config.frames,
                flops: mutualnet::model_cost(model, &r.config)?,
                accuracy: r.accuracy,
            })
        })
        .collect()
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::format(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| HarnessError::format(path, e))).collect()
}

/// `accuracy.json` (with provenance) and `accuracy.csv` (width, resolution,
/// frames, flops, accuracy).
pub fn save_accuracy(dir: &Path, acc: &AccuracyTable, model: &ModelSpec, config_hash: &str) -> Result<()> {
    let rows = accuracy_records(acc, model)?;
    let file = AccuracyFile {
        version: FORMAT_VERSION,
        config_hash: config_hash.into(),
        split: acc.split.clone(),
        samples: acc.samples,
        rows: rows.clone(),
    };
    write_atomic(&dir.join(ACCURACY_CSV_FILE), &csv_bytes(&rows)?)?;
    write_atomic(
        &dir.join(ACCURACY_JSON_FILE),
        serde_json::to_string_pretty(&file).expect("table serializes").as_bytes(),
    )
}

pub fn load_accuracy(dir: &Path, expected_hash: Option<&str>) -> Result<AccuracyTable> {
    let path = dir.join(ACCURACY_JSON_FILE);
    let file: AccuracyFile = serde_json::from_slice(&read(&path)?).map_err(|e| HarnessError::format(&path, e))?;
    check_hash(&path, expected_hash, &file.config_hash)?;
    Ok(AccuracyTable {
        rows: file
            .rows
            .iter()
            .map(|r| AccuracyRow {
                config: ModelConfig::with_frames(r.width, r.resolution, r.frames),
                accuracy: r.accuracy,
            })
            .collect(),
        split: file.split,
        samples: file.samples,
    })
}

/// One CSV row of the deployable query table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub budget_mflops: f64,
    pub width: f64,
    pub resolution: u32,
    pub frames: u32,
    pub accuracy: f64,
}

pub fn save_query_table(path: &Path, table: &QueryTable) -> Result<()> {
    let rows: Vec<QueryRecord> = table
        .entries()
        .iter()
        .map(|e| QueryRecord {
            budget_mflops: e.budget as f64 / 1e6,
            width: e.config.width,
            resolution: e.config.resolution,
            frames: e.config.frames,
            accuracy: e.accuracy,
        })
        .collect();
    write_atomic(path, &csv_bytes(&rows)?)
}

pub fn load_query_table(path: &Path) -> Result<QueryTable> {
    let rows: Vec<QueryRecord> = read_csv(path)?;
    let entries = rows
        .into_iter()
        .map(|r| QueryEntry {
            budget: (r.budget_mflops * 1e6).round() as u64,
            config: ModelConfig::with_frames(r.width, r.resolution, r.frames),
            accuracy: r.accuracy,
        })
        .collect();
    QueryTable::from_entries(entries).map_err(|e| HarnessError::format(path, e))
}

pub fn save_cost_table(path: &Path, rows: &[CostRow]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

/// Summary of one run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub name: String,
    pub mode: String,
    pub config_hash: String,
    pub epochs_completed: u64,
    pub files: Vec<String>,
}

pub fn save_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    write_atomic(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(m).expect("manifest serializes").as_bytes(),
    )
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    serde_json::from_slice(&read(&path)?).map_err(|e| HarnessError::format(&path, e))
}
