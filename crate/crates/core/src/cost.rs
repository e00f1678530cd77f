//! Multiply-accumulate cost model.
//!
//! Counting convention: one multiply-accumulate is one FLOP; biases and
//! normalization layers are not counted. Under this convention MobileNetV1
//! at 1.0×-224 costs 568.7M FLOPs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slim::active_channels_capped;
use crate::space::{LayerKind, LayerSpec, ModelConfig, ModelSpec, SamplingSpec, WIDTH_EPS};

/// Cost of a 2D layer at its declared (base) size.
pub fn layer_cost_2d(layer: &LayerSpec) -> Result<u64> {
    if !layer.kind.is_2d() {
        return Err(Error::KindMismatch {
            op: "layer_cost_2d",
            expected: "2D",
            actual: layer.kind.to_string(),
        });
    }
    Ok(layer_cost(layer))
}

/// Cost of any layer at its declared (base) size.
pub fn layer_cost(layer: &LayerSpec) -> u64 {
    let dims = LayerDims {
        ci: layer.in_channels as u64,
        co: layer.out_channels as u64,
        h: layer.output_spatial[0] as u64,
        w: layer.output_spatial[1] as u64,
        t: layer.output_temporal as u64,
    };
    dims.cost(layer)
}

struct LayerDims {
    ci: u64,
    co: u64,
    h: u64,
    w: u64,
    t: u64,
}

impl LayerDims {
    fn cost(&self, layer: &LayerSpec) -> u64 {
        let k = layer.kernel as u64;
        let kt = layer.kernel_t() as u64;
        match layer.kind {
            LayerKind::Linear => self.ci * self.co,
            LayerKind::DepthwiseConv2d => k * k * self.ci * self.h * self.w * self.t,
            LayerKind::Conv2d => k * k * self.ci * self.co * self.h * self.w * self.t,
            LayerKind::Conv3d => kt * k * k * self.ci * self.co * self.h * self.w * self.t,
        }
    }
}

fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor().max(0.0) as u64
}

/// Cost of a layer under a configuration: channels follow the slicing
/// rule, spatial and temporal output sizes are rounded per layer.
pub fn scaled_layer_cost(layer: &LayerSpec, model: &ModelSpec, config: &ModelConfig) -> Result<u64> {
    config.check(model)?;
    Ok(scaled_cost_unchecked(layer, model, config))
}

fn scaled_cost_unchecked(layer: &LayerSpec, model: &ModelSpec, config: &ModelConfig) -> u64 {
    let hi = model.width_bounds[1];
    let div = model.channel_divisor;
    let scale = |c: u32, scalable: bool| -> u64 {
        if scalable {
            active_channels_capped(c as usize, config.width, hi, div as usize) as u64
        } else {
            c as u64
        }
    };
    let gs = config.spatial_factor(model);
    let gt = config.temporal_factor(model);
    let dims = if layer.kind == LayerKind::Linear {
        LayerDims {
            ci: scale(layer.in_channels, layer.in_scalable),
            co: scale(layer.out_channels, layer.out_scalable),
            h: 1,
            w: 1,
            t: 1,
        }
    } else {
        LayerDims {
            ci: scale(layer.in_channels, layer.in_scalable),
            co: scale(layer.out_channels, layer.out_scalable),
            h: round_half_up(gs * layer.output_spatial[0] as f64).max(1),
            w: round_half_up(gs * layer.output_spatial[1] as f64).max(1),
            t: round_half_up(gt * layer.output_temporal as f64).max(1),
        }
    };
    dims.cost(layer)
}

/// Whole-model cost of a configuration.
pub fn model_cost(model: &ModelSpec, config: &ModelConfig) -> Result<u64> {
    config.check(model)?;
    Ok(model
        .layers
        .iter()
        .map(|l| scaled_cost_unchecked(l, model, config))
        .sum())
}

/// Expected per-iteration training cost, split by sandwich role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCost {
    pub full: f64,
    pub lower_bound: f64,
    /// Expected cost of one randomly sampled sub-network.
    pub random_each: f64,
    pub n_random: usize,
    pub total: f64,
}

/// Expected training cost of one iteration under `sampling`.
///
/// Computed analytically: the model cost is piecewise constant in the width
/// factor (channel counts only change where `γw·C/d` crosses a half
/// integer), so the uniform-width expectation is an exact finite sum over
/// those intervals. Resolutions and frame counts are averaged uniformly.
pub fn expected_training_cost(model: &ModelSpec, sampling: &SamplingSpec) -> Result<f64> {
    Ok(expected_training_cost_breakdown(model, sampling)?.total)
}

pub fn expected_training_cost_breakdown(model: &ModelSpec, sampling: &SamplingSpec) -> Result<ExpectedCost> {
    sampling.validate()?;
    let (lo, hi) = (sampling.width_lower, sampling.width_upper);
    let sizes: Vec<(u32, u32)> = sampling
        .resolution_set
        .iter()
        .flat_map(|&r| sampling.temporal_set.iter().map(move |&t| (r, t)))
        .collect();
    let mean_over_sizes = |width: f64| -> Result<f64> {
        let mut acc = 0.0;
        for &(r, t) in &sizes {
            acc += model_cost(model, &ModelConfig::with_frames(width, r, t))? as f64;
        }
        Ok(acc / sizes.len() as f64)
    };
    let full = model_cost(
        model,
        &ModelConfig::with_frames(hi, sampling.max_resolution(), sampling.max_frames()),
    )? as f64;
    let lower_bound = mean_over_sizes(lo)?;
    let random_each = if hi - lo <= WIDTH_EPS {
        mean_over_sizes(lo)?
    } else {
        let mut cuts = vec![lo, hi];
        cuts.extend(width_breakpoints(model, lo, hi));
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut acc = 0.0;
        for pair in cuts.windows(2) {
            let len = pair[1] - pair[0];
            if len > 0.0 {
                acc += len * mean_over_sizes(0.5 * (pair[0] + pair[1]))?;
            }
        }
        acc / (hi - lo)
    };
    let n = sampling.n_random;
    Ok(ExpectedCost {
        full,
        lower_bound,
        random_each,
        n_random: n,
        total: full + lower_bound + n as f64 * random_each,
    })
}

/// Widths in `(lo, hi)` where some scalable channel count changes.
fn width_breakpoints(model: &ModelSpec, lo: f64, hi: f64) -> Vec<f64> {
    let d = model.channel_divisor as f64;
    let mut channels: Vec<u32> = model
        .layers
        .iter()
        .flat_map(|l| {
            let a = l.in_scalable.then_some(l.in_channels);
            let b = l.out_scalable.then_some(l.out_channels);
            a.into_iter().chain(b)
        })
        .collect();
    channels.sort_unstable();
    channels.dedup();
    let mut out = Vec::new();
    for c in channels {
        let c = c as f64;
        // active count steps at γ = (k + 0.5)·d / C
        let k_lo = (lo * c / d - 0.5).floor().max(0.0) as u64;
        let k_hi = (hi * c / d - 0.5).ceil() as u64;
        for k in k_lo..=k_hi {
            let g = (k as f64 + 0.5) * d / c;
            if g > lo && g < hi {
                out.push(g);
            }
        }
    }
    out
}

/// Width × resolution × frames grid, ordered by width, then resolution,
/// then frames (all ascending).
pub fn enumerate_configs(
    model: &ModelSpec,
    width_step: f64,
    resolutions: &[u32],
    frames: &[u32],
) -> Result<Vec<ModelConfig>> {
    if width_step.is_nan() || width_step <= 0.0 {
        return Err(Error::Config(format!("width step must be positive, got {width_step}")));
    }
    let [lo, hi] = model.width_bounds;
    let count = ((hi - lo) / width_step + 1e-9).floor() as usize + 1;
    let mut res = resolutions.to_vec();
    res.sort_unstable();
    res.dedup();
    let mut fr = if frames.is_empty() { vec![1] } else { frames.to_vec() };
    fr.sort_unstable();
    fr.dedup();
    let mut out = Vec::with_capacity(count * res.len() * fr.len());
    for i in 0..count {
        // snap to 1e-9 so 0.25 + 3·0.05 prints as 0.4
        let w = ((lo + i as f64 * width_step) * 1e9).round() / 1e9;
        for &r in &res {
            for &t in &fr {
                out.push(ModelConfig::with_frames(w.min(hi), r, t));
            }
        }
    }
    Ok(out)
}

/// One row of an exported cost table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub width: f64,
    pub resolution: u32,
    pub frames: u32,
    pub flops: u64,
}

pub fn cost_table(model: &ModelSpec, configs: &[ModelConfig]) -> Result<Vec<CostRow>> {
    configs
        .iter()
        .map(|c| {
            Ok(CostRow {
                width: c.width,
                resolution: c.resolution,
                frames: c.frames,
                flops: model_cost(model, c)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archs;

    fn conv(k: u32, ci: u32, co: u32, hw: u32) -> LayerSpec {
        LayerSpec::conv2d(k, ci, co, hw)
    }

    #[test]
    fn layer_cost_examples() {
        assert_eq!(layer_cost_2d(&conv(3, 16, 32, 8)).unwrap(), 294_912);
        assert_eq!(layer_cost_2d(&conv(1, 1, 1, 1)).unwrap(), 1);
        assert_eq!(layer_cost_2d(&conv(3, 3, 32, 112)).unwrap(), 10_838_016);
        assert_eq!(layer_cost_2d(&LayerSpec::depthwise(3, 32, 112)).unwrap(), 3_612_672);
        assert_eq!(layer_cost_2d(&LayerSpec::linear(1024, 1000)).unwrap(), 1_024_000);
        let err = layer_cost_2d(&LayerSpec::conv3d(3, 3, 8, 8, 4, 4)).unwrap_err();
        assert!(matches!(err, Error::KindMismatch { .. }));
    }

    fn single_layer_model(layer: LayerSpec, base: u32, frames: u32) -> ModelSpec {
        ModelSpec {
            name: "single".into(),
            layers: vec![layer],
            base_resolution: base,
            base_frames: frames,
            width_bounds: [0.01, 1.0],
            channel_divisor: 1,
        }
    }

    #[test]
    fn scaled_cost_examples() {
        let layer = conv(3, 16, 32, 8);
        let model = single_layer_model(layer.clone(), 8, 1);
        let c = ModelConfig::new(0.5, 4);
        assert_eq!(scaled_layer_cost(&layer, &model, &c).unwrap(), 18_432);
        assert_eq!(294_912 / 16, 18_432);
        let full = ModelConfig::new(1.0, 8);
        assert_eq!(scaled_layer_cost(&layer, &model, &full).unwrap(), layer_cost(&layer));

        let l3 = LayerSpec::conv3d(3, 3, 8, 8, 4, 4);
        let m3 = single_layer_model(l3.clone(), 4, 4);
        let half_t = ModelConfig::with_frames(1.0, 4, 2);
        assert_eq!(
            scaled_layer_cost(&l3, &m3, &half_t).unwrap() * 2,
            layer_cost(&l3)
        );
    }

    #[test]
    fn out_of_bounds_config_is_a_range_error() {
        let m = archs::mobilenet_v1();
        let err = model_cost(&m, &ModelConfig::new(0.1, 224)).unwrap_err();
        assert!(matches!(err, Error::Range { .. }));
    }

    #[test]
    fn mobilenet_headline_costs() {
        let m = archs::mobilenet_v1();
        assert_eq!(model_cost(&m, &ModelConfig::new(1.0, 224)).unwrap(), 568_740_352);
        assert_eq!(model_cost(&m, &ModelConfig::new(0.5, 224)).unwrap(), 149_497_088);
        assert_eq!(model_cost(&m, &ModelConfig::new(0.25, 128)).unwrap(), 13_570_048);
    }

    #[test]
    fn degenerate_sampling_collapses_to_full_cost() {
        let m = archs::cifar_convnet();
        let s = SamplingSpec {
            width_lower: 1.0,
            width_upper: 1.0,
            n_random: 0,
            resolution_set: vec![32],
            temporal_set: vec![1],
            seed: 0,
        };
        let full = model_cost(&m, &ModelConfig::new(1.0, 32)).unwrap() as f64;
        // full entry plus the lower-bound entry, which is the same config
        assert_eq!(expected_training_cost(&m, &s).unwrap(), 2.0 * full);
    }

    #[test]
    fn enumerate_counts_and_order() {
        let m = archs::mobilenet_v1();
        let grid = enumerate_configs(&m, 0.05, &[224, 192, 160, 128], &[1]).unwrap();
        assert_eq!(grid.len(), 64);
        assert_eq!(grid[0], ModelConfig::new(0.25, 128));
        assert_eq!(grid[63], ModelConfig::new(1.0, 224));
        assert_eq!(grid[4].width, 0.3);

        let mut m1 = archs::cifar_convnet();
        m1.width_bounds = [1.0, 1.0];
        assert_eq!(enumerate_configs(&m1, 0.05, &[32], &[1]).unwrap().len(), 1);

        let mut m2 = archs::tiny_slow3d();
        m2.width_bounds = [0.7, 1.0];
        let g = enumerate_configs(&m2, 0.1, &[224, 192], &[8, 4]).unwrap();
        assert_eq!(g.len(), 16);
        assert_eq!(g[1], ModelConfig::with_frames(0.7, 192, 8));
        assert!(enumerate_configs(&m2, 0.0, &[224], &[8]).is_err());
    }
}
