//! Configuration space: executable configurations, architecture
//! descriptions and the training-time sampling distribution.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One executable configuration of the shared network.
///
/// The spatial and temporal factors are stored as concrete sizes; the
/// factors themselves are `resolution / base_resolution` and
/// `frames / base_frames` of the owning [`ModelSpec`]. 2D models use
/// `frames = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: f64,
    pub resolution: u32,
    #[serde(default = "one")]
    pub frames: u32,
}

fn one() -> u32 {
    1
}

impl ModelConfig {
    pub fn new(width: f64, resolution: u32) -> Self {
        Self {
            width,
            resolution,
            frames: 1,
        }
    }

    pub fn with_frames(width: f64, resolution: u32, frames: u32) -> Self {
        Self {
            width,
            resolution,
            frames,
        }
    }

    pub fn spatial_factor(&self, model: &ModelSpec) -> f64 {
        self.resolution as f64 / model.base_resolution as f64
    }

    pub fn temporal_factor(&self, model: &ModelSpec) -> f64 {
        self.frames as f64 / model.base_frames as f64
    }

    pub fn key(&self) -> ConfigKey {
        ConfigKey {
            width_micros: (self.width * 1e6).round() as u64,
            resolution: self.resolution,
            frames: self.frames,
        }
    }

    /// The full configuration of a model: upper width bound at base size.
    pub fn full(model: &ModelSpec) -> Self {
        Self {
            width: model.width_bounds[1],
            resolution: model.base_resolution,
            frames: model.base_frames,
        }
    }

    /// Checks the configuration against the model's declared bounds.
    pub fn check(&self, model: &ModelSpec) -> Result<()> {
        let [lo, hi] = model.width_bounds;
        if !(self.width >= lo - WIDTH_EPS && self.width <= hi + WIDTH_EPS) {
            return Err(Error::Range {
                what: "width factor",
                value: self.width,
                lo,
                hi,
            });
        }
        if self.resolution == 0 || self.resolution > model.base_resolution {
            return Err(Error::Range {
                what: "resolution",
                value: self.resolution as f64,
                lo: 1.0,
                hi: model.base_resolution as f64,
            });
        }
        if self.frames == 0 || self.frames > model.base_frames {
            return Err(Error::Range {
                what: "frames",
                value: self.frames as f64,
                lo: 1.0,
                hi: model.base_frames as f64,
            });
        }
        Ok(())
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.key())
    }
}

/// Slack for width comparisons against bounds produced by float grids.
pub(crate) const WIDTH_EPS: f64 = 1e-9;

/// Exact, orderable identity of a configuration (width in millionths).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConfigKey {
    pub width_micros: u64,
    pub resolution: u32,
    pub frames: u32,
}

impl ConfigKey {
    pub fn width(&self) -> f64 {
        self.width_micros as f64 / 1e6
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig::with_frames(self.width(), self.resolution, self.frames)
    }
}

impl fmt::Display for ConfigKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}x-{}", self.width(), self.resolution)?;
        if self.frames != 1 {
            write!(f, "-{}f", self.frames)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    Conv3d,
    Linear,
}

impl LayerKind {
    pub fn is_2d(self) -> bool {
        !matches!(self, LayerKind::Conv3d)
    }

    pub fn is_conv(self) -> bool {
        !matches!(self, LayerKind::Linear)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::DepthwiseConv2d => "depthwise_conv2d",
            LayerKind::Conv3d => "conv3d",
            LayerKind::Linear => "linear",
        };
        f.write_str(s)
    }
}

fn yes() -> bool {
    true
}

/// One layer of an architecture, at base resolution and base frame count.
///
/// Strides are implied by consecutive output sizes. Every convolution is
/// followed by batch normalization and ReLU; `residual` adds the layer
/// input before the ReLU (input and output shapes must agree).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: u32,
    /// Temporal kernel of a 3D convolution; defaults to `kernel`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal_kernel: Option<u32>,
    pub in_channels: u32,
    pub out_channels: u32,
    /// Output `[H, W]` at base resolution; `[1, 1]` for linear layers.
    pub output_spatial: [u32; 2],
    /// Output frames at base frame count (3D only).
    #[serde(default = "one")]
    pub output_temporal: u32,
    #[serde(default = "yes")]
    pub in_scalable: bool,
    #[serde(default = "yes")]
    pub out_scalable: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub residual: bool,
}

impl LayerSpec {
    pub fn conv2d(k: u32, ci: u32, co: u32, hw: u32) -> Self {
        Self {
            kind: LayerKind::Conv2d,
            kernel: k,
            temporal_kernel: None,
            in_channels: ci,
            out_channels: co,
            output_spatial: [hw, hw],
            output_temporal: 1,
            in_scalable: true,
            out_scalable: true,
            residual: false,
        }
    }

    pub fn depthwise(k: u32, c: u32, hw: u32) -> Self {
        Self {
            kind: LayerKind::DepthwiseConv2d,
            ..Self::conv2d(k, c, c, hw)
        }
    }

    pub fn conv3d(k: u32, kt: u32, ci: u32, co: u32, hw: u32, t: u32) -> Self {
        Self {
            kind: LayerKind::Conv3d,
            temporal_kernel: Some(kt),
            output_temporal: t,
            ..Self::conv2d(k, ci, co, hw)
        }
    }

    pub fn linear(ci: u32, co: u32) -> Self {
        Self {
            kind: LayerKind::Linear,
            ..Self::conv2d(1, ci, co, 1)
        }
    }

    pub fn fixed_input(mut self) -> Self {
        self.in_scalable = false;
        self
    }

    pub fn fixed_output(mut self) -> Self {
        self.out_scalable = false;
        self
    }

    pub fn with_residual(mut self) -> Self {
        self.residual = true;
        self
    }

    pub fn kernel_t(&self) -> u32 {
        match self.kind {
            LayerKind::Conv3d => self.temporal_kernel.unwrap_or(self.kernel),
            _ => 1,
        }
    }
}

/// An architecture: ordered layers plus the base input geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub base_resolution: u32,
    #[serde(default = "one")]
    pub base_frames: u32,
    pub width_bounds: [f64; 2],
    pub channel_divisor: u32,
}

impl ModelSpec {
    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels as usize)
    }

    pub fn input_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels as usize)
    }

    pub fn is_3d(&self) -> bool {
        self.layers.iter().any(|l| l.kind == LayerKind::Conv3d)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("model spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    /// Strides `[t, h, w]` implied by the output sizes of consecutive layers.
    pub fn strides(&self) -> Result<Vec<[usize; 3]>> {
        let mut prev = [self.base_frames, self.base_resolution, self.base_resolution];
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if l.kind == LayerKind::Linear {
                out.push([1, 1, 1]);
                continue;
            }
            let cur = [l.output_temporal, l.output_spatial[0], l.output_spatial[1]];
            let mut s = [1usize; 3];
            for d in 0..3 {
                if cur[d] == 0 || !prev[d].is_multiple_of(cur[d]) {
                    return Err(Error::Config(format!(
                        "layer {i}: output size {:?} does not evenly divide input size {:?}",
                        cur, prev
                    )));
                }
                s[d] = (prev[d] / cur[d]) as usize;
            }
            out.push(s);
            prev = cur;
        }
        Ok(out)
    }

    /// Full validation of a classification network.
    pub fn validate(&self) -> Result<()> {
        self.validate_layers(true)
    }

    /// Validation of a headless backbone (e.g. a fixed side branch): the
    /// last layer need not be a classifier.
    pub fn validate_backbone(&self) -> Result<()> {
        self.validate_layers(false)
    }

    fn validate_layers(&self, classifier: bool) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name)));
        if self.layers.is_empty() {
            return fail("no layers".into());
        }
        let [lo, hi] = self.width_bounds;
        if !(lo > 0.0 && lo <= hi) {
            return fail(format!("width bounds [{lo}, {hi}] must satisfy 0 < lo <= hi"));
        }
        if self.channel_divisor == 0 || self.base_resolution == 0 || self.base_frames == 0 {
            return fail("divisor, base resolution and base frames must be positive".into());
        }
        let last = self.layers.len() - 1;
        let mut seen_linear = false;
        for (i, l) in self.layers.iter().enumerate() {
            let dims = [
                l.kernel,
                l.kernel_t(),
                l.in_channels,
                l.out_channels,
                l.output_spatial[0],
                l.output_spatial[1],
                l.output_temporal,
            ];
            if dims.contains(&0) {
                return fail(format!("layer {i}: all dimensions must be positive"));
            }
            if l.kind == LayerKind::DepthwiseConv2d && l.in_channels != l.out_channels {
                return fail(format!("layer {i}: depthwise layer must keep its channel count"));
            }
            if l.kind == LayerKind::Linear {
                seen_linear = true;
                if l.output_spatial != [1, 1] {
                    return fail(format!("layer {i}: linear layers have unit spatial output"));
                }
            } else if seen_linear {
                return fail(format!("layer {i}: convolution after a linear layer"));
            }
            if l.kind.is_2d() && l.kind.is_conv() && l.output_temporal != 1 && self.base_frames == 1 {
                return fail(format!("layer {i}: 2D layer with temporal extent"));
            }
            if l.in_scalable != (i != 0) {
                return fail(format!(
                    "layer {i}: only the input layer has non-scalable input channels"
                ));
            }
            if classifier && l.out_scalable != (i != last) {
                return fail(format!(
                    "layer {i}: only the classifier has non-scalable output channels"
                ));
            }
            if i > 0 && self.layers[i - 1].out_channels != l.in_channels {
                return fail(format!(
                    "layer {i}: input channels {} do not chain from {}",
                    l.in_channels,
                    self.layers[i - 1].out_channels
                ));
            }
            if l.in_scalable && self.channel_divisor > l.in_channels
                || l.out_scalable && self.channel_divisor > l.out_channels
            {
                return fail(format!("layer {i}: channel divisor exceeds channel count"));
            }
        }
        if classifier && self.layers[last].kind != LayerKind::Linear {
            return fail("the last layer must be a linear classifier".into());
        }
        let strides = self.strides()?;
        for (i, l) in self.layers.iter().enumerate() {
            if l.residual && (l.in_channels != l.out_channels || strides[i] != [1, 1, 1]) {
                return fail(format!("layer {i}: residual layer must preserve its shape"));
            }
        }
        Ok(())
    }
}

/// Training-time sampling distribution over configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub width_lower: f64,
    pub width_upper: f64,
    pub n_random: usize,
    pub resolution_set: Vec<u32>,
    #[serde(default = "single_frame")]
    pub temporal_set: Vec<u32>,
    pub seed: u64,
}

fn single_frame() -> Vec<u32> {
    vec![1]
}

impl SamplingSpec {
    pub fn max_resolution(&self) -> u32 {
        self.resolution_set.iter().copied().max().unwrap_or(0)
    }

    pub fn max_frames(&self) -> u32 {
        self.temporal_set.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_lower > 0.0 && self.width_lower <= self.width_upper) {
            return Err(Error::Config(format!(
                "sampling width bounds [{}, {}] must satisfy 0 < lower <= upper",
                self.width_lower, self.width_upper
            )));
        }
        if self.resolution_set.is_empty() || self.resolution_set.contains(&0) {
            return Err(Error::Config("resolution set must be nonempty and positive".into()));
        }
        if self.temporal_set.is_empty() || self.temporal_set.contains(&0) {
            return Err(Error::Config("temporal set must be nonempty and positive".into()));
        }
        Ok(())
    }

    /// Validation plus agreement with a concrete model.
    pub fn validate_for(&self, model: &ModelSpec) -> Result<()> {
        self.validate()?;
        if self.max_resolution() != model.base_resolution {
            return Err(Error::Config(format!(
                "largest sampled resolution {} differs from the base resolution {}",
                self.max_resolution(),
                model.base_resolution
            )));
        }
        if self.max_frames() != model.base_frames {
            return Err(Error::Config(format!(
                "largest sampled frame count {} differs from the base frame count {}",
                self.max_frames(),
                model.base_frames
            )));
        }
        let [lo, hi] = model.width_bounds;
        if self.width_lower < lo - WIDTH_EPS || self.width_upper > hi + WIDTH_EPS {
            return Err(Error::Config(format!(
                "sampled widths [{}, {}] exceed the model bounds [{lo}, {hi}]",
                self.width_lower, self.width_upper
            )));
        }
        Ok(())
    }
}
