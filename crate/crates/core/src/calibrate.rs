//! Post-training batch-normalization calibration.
//!
//! Running statistics are never learned during training. After training,
//! each configuration gets its own statistics by forwarding a few batches
//! (normalizing with batch moments, as in training) and accumulating the
//! exact mean and variance of every normalization input over all samples.
//! No gradients are computed and parameters are not modified.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::slim::{resize_input, BnMode, SlimNetwork};
use crate::space::{ConfigKey, ModelConfig};

/// Floor applied to calibrated variances.
pub const VAR_FLOOR: f64 = 1e-10;

/// Default number of calibration batches.
pub const DEFAULT_CALIBRATION_BATCHES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnLayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Statistics of one configuration, one slot per layer (`None` for layers
/// without normalization).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStatsEntry {
    pub layers: Vec<Option<BnLayerStats>>,
    pub batches: usize,
    pub samples: usize,
}

impl BnStatsEntry {
    /// Leading-channel slice of these statistics, sized for `config`. Used
    /// to run a sub-configuration with another configuration's statistics.
    pub fn sliced_for(&self, net: &SlimNetwork, config: &ModelConfig) -> Result<BnStatsEntry> {
        let report = net.slice_report(config)?;
        let layers = self
            .layers
            .iter()
            .zip(&report)
            .map(|(s, r)| {
                s.as_ref().map(|s| BnLayerStats {
                    mean: s.mean[..r.active_out.min(s.mean.len())].to_vec(),
                    var: s.var[..r.active_out.min(s.var.len())].to_vec(),
                })
            })
            .collect();
        Ok(BnStatsEntry {
            layers,
            batches: self.batches,
            samples: self.samples,
        })
    }
}

/// Per-configuration normalization statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BnStatsBank {
    entries: BTreeMap<ConfigKey, BnStatsEntry>,
}

impl BnStatsBank {
    pub fn get(&self, config: &ModelConfig) -> Option<&BnStatsEntry> {
        self.entries.get(&config.key())
    }

    pub fn insert(&mut self, key: ConfigKey, entry: BnStatsEntry) -> Option<BnStatsEntry> {
        self.entries.insert(key, entry)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ConfigKey, &BnStatsEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, config: &ModelConfig) -> bool {
        self.entries.contains_key(&config.key())
    }
}

/// Running per-channel moments merged batch by batch (Chan et al.).
#[derive(Clone, Debug)]
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(channels: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    fn push(&mut self, z: &[f32], [n, c, pos]: [usize; 3]) {
        let nb = (n * pos) as f64;
        for ch in 0..c {
            let mut s = 0.0;
            for smp in 0..n {
                let off = (smp * c + ch) * pos;
                s += z[off..off + pos].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mb = s / nb;
            let mut m2b = 0.0;
            for smp in 0..n {
                let off = (smp * c + ch) * pos;
                m2b += z[off..off + pos].iter().map(|&v| (v as f64 - mb).powi(2)).sum::<f64>();
            }
            let total = self.count + nb;
            let delta = mb - self.mean[ch];
            self.mean[ch] += delta * nb / total;
            self.m2[ch] += m2b + delta * delta * self.count * nb / total;
        }
        self.count += nb;
    }

    fn finish(self) -> BnLayerStats {
        let count = self.count;
        BnLayerStats {
            var: self.m2.iter().map(|m2| (m2 / count).max(VAR_FLOOR)).collect(),
            mean: self.mean,
        }
    }
}

/// Calibrates one configuration from the first `num_batches` batches of
/// `data` (fewer if the stream is shorter). Batches are resized to the
/// configuration's resolution and frame count.
pub fn calibrate(net: &SlimNetwork, config: &ModelConfig, data: &[Batch], num_batches: usize) -> Result<BnStatsEntry> {
    if num_batches == 0 {
        return Err(Error::InsufficientData("calibration needs at least one batch".into()));
    }
    let used = &data[..num_batches.min(data.len())];
    if used.iter().all(Batch::is_empty) {
        return Err(Error::InsufficientData(format!(
            "no calibration samples for {config}"
        )));
    }
    let layers = net.spec().layers.len();
    let mut acc: Vec<Option<Moments>> = vec![None; layers];
    let mut samples = 0;
    for batch in used.iter().filter(|b| !b.is_empty()) {
        let x = resize_input(&batch.images, config.resolution, config.frames)?;
        let mut probe = |layer: usize, z: &[f32], dims: [usize; 3]| {
            acc[layer]
                .get_or_insert_with(|| Moments::new(dims[1]))
                .push(z, dims);
        };
        net.forward_probe(config, &x, BnMode::BatchStats, &mut probe)?;
        samples += batch.len();
    }
    Ok(BnStatsEntry {
        layers: acc.into_iter().map(|m| m.map(Moments::finish)).collect(),
        batches: used.len(),
        samples,
    })
}

/// Calibrates every configuration in turn. A repeated configuration keeps
/// its last calibration and logs a warning.
pub fn calibrate_all(
    net: &SlimNetwork,
    configs: &[ModelConfig],
    data: &[Batch],
    num_batches: usize,
) -> Result<BnStatsBank> {
    let mut bank = BnStatsBank::default();
    for config in configs {
        let entry = calibrate(net, config, data, num_batches).map_err(|e| e.at(config.key()))?;
        if bank.insert(config.key(), entry).is_some() {
            log::warn!("configuration {config} listed more than once; keeping the last calibration");
        }
    }
    Ok(bank)
}
