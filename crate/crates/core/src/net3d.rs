//! Spatio-temporal extension: joint width/spatial/temporal sampling for
//! single-pathway 3D networks, and the adaptive fusion block joining a
//! fixed Fast pathway to an adaptively sliced Slow pathway.
//!
//! Feature shapes are written `{T, S², C}`. The Slow pathway runs at
//! `{γt·T, (γs·S)², γw·C}`; the Fast pathway always runs at `{α·T, S², β·C}`.
//! Fusion maps the Fast features through a `5×1²` convolution with `2βC`
//! outputs and temporal stride `α`, resamples them to the Slow geometry and
//! appends them as the trailing `2βC` channels.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::slim::active_channels_capped;
use crate::space::{LayerKind, ModelConfig, ModelSpec, SamplingSpec};
use crate::tensor::Tensor;
use crate::train::{sample_iteration_configs, IterationPlan};

/// Default number of random sub-networks per iteration for 3D models.
pub const DEFAULT_3D_RANDOM: usize = 2;

/// Temporal kernel of the lateral convolution.
pub const LATERAL_KERNEL_T: usize = 5;

/// Sandwich plan over (width, resolution, frames).
pub fn sample_3d_configs<R: Rng + ?Sized>(sampling: &SamplingSpec, rng: &mut R) -> Result<IterationPlan> {
    if sampling.temporal_set.is_empty() {
        return Err(Error::Config("3D sampling needs a temporal set".into()));
    }
    sample_iteration_configs(sampling, rng)
}

/// Two-pathway architecture: an adaptive Slow pathway and a fixed Fast one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoBranchSpec {
    pub slow: ModelSpec,
    pub fast: ModelSpec,
    /// Frame-rate ratio Fast / Slow.
    pub alpha: u32,
    /// Channel ratio Fast / Slow.
    pub beta: f64,
    /// Slow layer indices whose outputs receive a lateral connection. The
    /// Fast layer with the same index supplies it.
    pub fusion_points: Vec<usize>,
}

impl TwoBranchSpec {
    pub fn validate(&self) -> Result<()> {
        self.slow.validate()?;
        self.fast.validate_backbone()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.alpha < 1 {
            return fail(format!("alpha must be at least 1, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return fail(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if self.fast.width_bounds != [1.0, 1.0] {
            return fail("the Fast pathway is never sliced; its width bounds must be [1, 1]".into());
        }
        if self.fast.base_frames != self.alpha * self.slow.base_frames
            || self.fast.base_resolution != self.slow.base_resolution
        {
            return fail("Fast input must have alpha times the Slow frames at the same resolution".into());
        }
        for &i in &self.fusion_points {
            let point = self.fusion_point(i)?;
            let f = self.fast.layers.get(i).ok_or_else(|| {
                Error::Config(format!("fusion point {i} has no matching Fast layer"))
            })?;
            let expect_t = self.alpha as usize * point.frames;
            if f.out_channels as usize != point.fast_channels
                || f.output_spatial != [point.spatial as u32; 2]
                || f.output_temporal as usize != expect_t
            {
                return fail(format!(
                    "fusion point {i}: Fast layer must output {{{expect_t}, {}², {}}}",
                    point.spatial, point.fast_channels
                ));
            }
        }
        Ok(())
    }

    /// Geometry of the Slow stage output at fusion point `layer`.
    pub fn fusion_point(&self, layer: usize) -> Result<FusionPoint> {
        let l = self
            .slow
            .layers
            .get(layer)
            .filter(|l| l.kind != LayerKind::Linear)
            .ok_or_else(|| Error::Config(format!("fusion point {layer} is not a Slow convolution")))?;
        let c = l.out_channels as usize;
        let fast = (self.beta * c as f64).round() as usize;
        if fast == 0 || (fast as f64 - self.beta * c as f64).abs() > 1e-9 {
            return Err(Error::Config(format!("beta·C = {} is not a positive integer", self.beta * c as f64)));
        }
        if l.output_spatial[0] != l.output_spatial[1] {
            return Err(Error::Config(format!("fusion point {layer} is not square")));
        }
        Ok(FusionPoint {
            slow_channels: c,
            fast_channels: fast,
            frames: l.output_temporal as usize,
            spatial: l.output_spatial[0] as usize,
        })
    }
}

/// Base (unscaled) geometry at one fusion point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionPoint {
    /// `C`
    pub slow_channels: usize,
    /// `βC`
    pub fast_channels: usize,
    /// `T`
    pub frames: usize,
    /// `S`
    pub spatial: usize,
}

impl FusionPoint {
    /// `2βC`
    pub fn lateral_channels(&self) -> usize {
        2 * self.fast_channels
    }
}

/// `{frames, side², channels}` of one feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub frames: usize,
    pub side: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionShapes {
    pub slow: FeatureShape,
    pub fast: FeatureShape,
    /// After the time-strided lateral convolution, before resampling.
    pub lateral: FeatureShape,
    pub fused: FeatureShape,
}

fn round_half_up(x: f64) -> usize {
    ((x + 0.5).floor() as usize).max(1)
}

/// Slicing parameters of the Slow pathway.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlowScaling {
    pub base_resolution: u32,
    pub base_frames: u32,
    pub max_width: f64,
    pub divisor: usize,
}

impl SlowScaling {
    pub fn of(slow: &ModelSpec) -> Self {
        Self {
            base_resolution: slow.base_resolution,
            base_frames: slow.base_frames,
            max_width: slow.width_bounds[1],
            divisor: slow.channel_divisor as usize,
        }
    }

    /// Shapes around a fusion point for `config`.
    pub fn shapes(&self, point: &FusionPoint, alpha: usize, config: &ModelConfig) -> FusionShapes {
        let gs = config.resolution as f64 / self.base_resolution as f64;
        let gt = config.frames as f64 / self.base_frames as f64;
        let side = round_half_up(gs * point.spatial as f64);
        let frames = round_half_up(gt * point.frames as f64);
        let slow_c = active_channels_capped(point.slow_channels, config.width, self.max_width, self.divisor);
        FusionShapes {
            slow: FeatureShape { frames, side, channels: slow_c },
            fast: FeatureShape {
                frames: alpha * point.frames,
                side: point.spatial,
                channels: point.fast_channels,
            },
            lateral: FeatureShape {
                frames: point.frames,
                side: point.spatial,
                channels: point.lateral_channels(),
            },
            fused: FeatureShape {
                frames,
                side,
                channels: slow_c + point.lateral_channels(),
            },
        }
    }
}

/// Input-column plan of the first convolution after a fusion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPlan {
    /// Leading Slow columns, varying with the width.
    pub slow: Range<usize>,
    /// Trailing columns reserved for the Fast pathway, fixed.
    pub fast: Range<usize>,
    pub total_columns: usize,
}

impl ChannelPlan {
    pub fn indices(&self) -> Vec<usize> {
        self.slow.clone().chain(self.fast.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.slow.len() + self.fast.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Weight columns read at width `width`: the leading active Slow columns
/// and the last `lateral` columns of a `C_alloc + lateral` column weight.
pub fn fusion_input_slicing(slow_channels: usize, width: f64, lateral: usize, scaling: &SlowScaling) -> ChannelPlan {
    let alloc = active_channels_capped(slow_channels, scaling.max_width, scaling.max_width, scaling.divisor);
    let active = active_channels_capped(slow_channels, width, scaling.max_width, scaling.divisor);
    ChannelPlan {
        slow: 0..active,
        fast: alloc..alloc + lateral,
        total_columns: alloc + lateral,
    }
}

fn normal_init(n: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let d = Normal::new(0.0, (2.0 / fan_in as f32).sqrt()).expect("positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// The lateral connection at one fusion point.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveFusion {
    pub point: FusionPoint,
    pub alpha: usize,
    pub scaling: SlowScaling,
    /// `[2βC, βC, 5, 1, 1]`
    pub weight: Vec<f32>,
}

impl AdaptiveFusion {
    pub fn new(spec: &TwoBranchSpec, layer: usize, seed: u64) -> Result<Self> {
        let point = spec.fusion_point(layer)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = point.fast_channels * LATERAL_KERNEL_T;
        Ok(Self {
            point,
            alpha: spec.alpha as usize,
            scaling: SlowScaling::of(&spec.slow),
            weight: normal_init(point.lateral_channels() * fan_in, fan_in, &mut rng),
        })
    }

    pub fn shapes(&self, config: &ModelConfig) -> FusionShapes {
        self.scaling.shapes(&self.point, self.alpha, config)
    }

    fn lateral_geom(&self) -> ConvGeom {
        ConvGeom {
            in_channels: self.point.fast_channels,
            out_channels: self.point.lateral_channels(),
            depthwise: false,
            kernel: [LATERAL_KERNEL_T, 1, 1],
            stride: [self.alpha, 1, 1],
            pad: [LATERAL_KERNEL_T / 2, 0, 0],
            input: [self.alpha * self.point.frames, self.point.spatial, self.point.spatial],
        }
    }

    /// Time-strided lateral convolution: `{αT, S², βC} → {T, S², 2βC}`.
    /// Independent of the Slow configuration.
    pub fn lateral(&self, fast: &Tensor) -> Result<Tensor> {
        let g = self.lateral_geom();
        let [n, c, t, h, w] = fast.dims5()?;
        let expect = [n, g.in_channels, g.input[0], g.input[1], g.input[2]];
        if [n, c, t, h, w] != expect {
            return Err(Error::Shape {
                stage: "fusion: fast input",
                expected: expect.to_vec(),
                actual: fast.shape().to_vec(),
            });
        }
        let [ot, oh, ow] = g.output();
        let y = kernels::conv_forward(fast.data(), n, &g, &self.weight);
        Tensor::from_vec(&[n, g.out_channels, ot, oh, ow], y)
    }

    /// Fuses Fast features into the Slow features of `config`.
    pub fn fuse(&self, slow: &Tensor, fast: &Tensor, config: &ModelConfig) -> Result<Tensor> {
        let shapes = self.shapes(config);
        let [n, sc, st, sh, sw] = slow.dims5()?;
        let expect = [n, shapes.slow.channels, shapes.slow.frames, shapes.slow.side, shapes.slow.side];
        if [n, sc, st, sh, sw] != expect {
            return Err(Error::Shape {
                stage: "fusion: slow input",
                expected: expect.to_vec(),
                actual: slow.shape().to_vec(),
            });
        }
        let lateral = self.lateral(fast)?;
        let lc = shapes.lateral.channels;
        let (lt, ls) = (shapes.lateral.frames, shapes.lateral.side);
        let resized = kernels::resize_bilinear(lateral.data(), n * lc * lt, ls, ls, sh, sw);
        let picks = kernels::frame_indices(lt, st);
        let lat = kernels::select_frames(&resized, n * lc, lt, sh * sw, &picks);
        let per = st * sh * sw;
        let mut out = Vec::with_capacity(n * (sc + lc) * per);
        for s in 0..n {
            out.extend_from_slice(&slow.data()[s * sc * per..(s + 1) * sc * per]);
            out.extend_from_slice(&lat[s * lc * per..(s + 1) * lc * per]);
        }
        let fused = [n, shapes.fused.channels, st, sh, sw];
        if sc + lc != shapes.fused.channels {
            return Err(Error::Shape {
                stage: "fusion: concatenation",
                expected: fused.to_vec(),
                actual: vec![n, sc + lc, st, sh, sw],
            });
        }
        Tensor::from_vec(&fused, out)
    }
}

/// Shapes-only entry point: `{γtT, (γsS)², (γw+2β)C}` and friends.
pub fn fusion_shapes(spec: &TwoBranchSpec, layer: usize, config: &ModelConfig) -> Result<FusionShapes> {
    let point = spec.fusion_point(layer)?;
    Ok(SlowScaling::of(&spec.slow).shapes(&point, spec.alpha as usize, config))
}

/// Functional form of [`AdaptiveFusion::fuse`].
pub fn adaptive_fuse(slow: &Tensor, fast: &Tensor, config: &ModelConfig, fusion: &AdaptiveFusion) -> Result<Tensor> {
    fusion.fuse(slow, fast, config)
}

/// First Slow convolution after a fusion. Its weight has `C_alloc + 2βC`
/// input columns; the trailing `2βC` always read the Fast channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionConsumer {
    pub slow_in: usize,
    pub lateral: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub scaling: SlowScaling,
    /// `[Co_alloc, C_alloc + 2βC, kt, k, k]`
    pub weight: Vec<f32>,
}

impl FusionConsumer {
    pub fn new(point: &FusionPoint, out_channels: usize, kernel: [usize; 3], scaling: SlowScaling, seed: u64) -> Self {
        let alloc_in = active_channels_capped(point.slow_channels, scaling.max_width, scaling.max_width, scaling.divisor);
        let alloc_out = active_channels_capped(out_channels, scaling.max_width, scaling.max_width, scaling.divisor);
        let cols = alloc_in + point.lateral_channels();
        let kv: usize = kernel.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            slow_in: point.slow_channels,
            lateral: point.lateral_channels(),
            out_channels,
            kernel,
            scaling,
            weight: normal_init(alloc_out * cols * kv, cols * kv, &mut rng),
        }
    }

    pub fn plan(&self, width: f64) -> ChannelPlan {
        fusion_input_slicing(self.slow_in, width, self.lateral, &self.scaling)
    }

    /// Convolves fused features at `width` (stride 1, same padding).
    pub fn forward(&self, fused: &Tensor, width: f64) -> Result<Tensor> {
        let plan = self.plan(width);
        let [n, c, t, h, w] = fused.dims5()?;
        if c != plan.len() {
            return Err(Error::Shape {
                stage: "fusion consumer input",
                expected: vec![n, plan.len(), t, h, w],
                actual: fused.shape().to_vec(),
            });
        }
        let co = active_channels_capped(self.out_channels, width, self.scaling.max_width, self.scaling.divisor);
        let kv: usize = self.kernel.iter().product();
        let cols = plan.indices();
        let mut wsl = Vec::with_capacity(co * cols.len() * kv);
        for o in 0..co {
            let row = o * plan.total_columns * kv;
            for &ci in &cols {
                wsl.extend_from_slice(&self.weight[row + ci * kv..row + (ci + 1) * kv]);
            }
        }
        let g = ConvGeom {
            in_channels: cols.len(),
            out_channels: co,
            depthwise: false,
            kernel: self.kernel,
            stride: [1, 1, 1],
            pad: [self.kernel[0] / 2, self.kernel[1] / 2, self.kernel[2] / 2],
            input: [t, h, w],
        };
        let [ot, oh, ow] = g.output();
        Tensor::from_vec(&[n, co, ot, oh, ow], kernels::conv_forward(fused.data(), n, &g, &wsl))
    }
}
