//! Slimmable building blocks. Every configuration runs on the leading
//! slice `W[0:w]` of each layer's parameters: the first `active_channels`
//! output filters and, within them, the first active input channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::calibrate::BnStatsBank;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::space::{LayerKind, ModelConfig, ModelSpec};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;

/// Channels used at width `width`: `round_half_up(width·C / d)·d`, floored
/// at `d` and capped at the full allocation for a maximum width of 1.
pub fn active_channels(c: usize, width: f64, divisor: usize) -> Result<usize> {
    if c == 0 || divisor == 0 || divisor > c {
        return Err(Error::Config(format!(
            "channel divisor {divisor} must be in [1, {c}]"
        )));
    }
    if !(width > 0.0 && width <= 1.0 + crate::space::WIDTH_EPS) {
        return Err(Error::Range {
            what: "width factor",
            value: width,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(active_channels_capped(c, width, 1.0, divisor))
}

/// [`active_channels`] with an explicit maximum width and no validation.
pub fn active_channels_capped(c: usize, width: f64, max_width: f64, divisor: usize) -> usize {
    let snap = |w: f64| -> usize {
        let units = (w * c as f64 / divisor as f64 + 0.5).floor() as usize;
        (units * divisor).max(divisor)
    };
    snap(width).min(snap(max_width))
}

/// Parameters of one layer. The same structure holds gradients, momentum
/// buffers and usage masks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub bn_scale: Vec<T>,
    pub bn_shift: Vec<T>,
}

impl<T: Clone> LayerParams<T> {
    pub fn tensors(&self) -> [&Vec<T>; 4] {
        [&self.weight, &self.bias, &self.bn_scale, &self.bn_shift]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<T>; 4] {
        [&mut self.weight, &mut self.bias, &mut self.bn_scale, &mut self.bn_shift]
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> LayerParams<U> {
        LayerParams {
            weight: self.weight.iter().map(&f).collect(),
            bias: self.bias.iter().map(&f).collect(),
            bn_scale: self.bn_scale.iter().map(&f).collect(),
            bn_shift: self.bn_shift.iter().map(&f).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<T> {
    pub layers: Vec<LayerParams<T>>,
}

pub type Gradients = Params<f32>;

impl<T: Clone> Params<T> {
    pub fn map<U>(&self, f: impl Fn(&T) -> U + Copy) -> Params<U> {
        Params {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.tensors().map(Vec::len))
            .sum()
    }

    /// Flattened view in a fixed (layer, weight, bias, scale, shift) order.
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for l in &self.layers {
            for t in l.tensors() {
                out.extend_from_slice(t);
            }
        }
        out
    }
}

impl Params<f32> {
    pub fn zeros_like<T>(other: &Params<T>) -> Self {
        Params {
            layers: other
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                    bn_scale: vec![0.0; l.bn_scale.len()],
                    bn_shift: vec![0.0; l.bn_shift.len()],
                })
                .collect(),
        }
    }

    pub fn fill(&mut self, v: f32) {
        for l in &mut self.layers {
            for t in l.tensors_mut() {
                t.iter_mut().for_each(|x| *x = v);
            }
        }
    }

    pub fn add_assign(&mut self, other: &Params<f32>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (ta, tb) in a.tensors_mut().into_iter().zip(b.tensors()) {
                ta.iter_mut().zip(tb).for_each(|(x, y)| *x += y);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerGeometry {
    kind: LayerKind,
    kernel: [usize; 3],
    stride: [usize; 3],
    alloc_in: usize,
    alloc_out: usize,
    in_scalable: bool,
    out_scalable: bool,
    residual: bool,
}

impl LayerGeometry {
    /// Input channels per output filter in the weight tensor.
    fn weight_in(&self) -> usize {
        if self.kind == LayerKind::DepthwiseConv2d {
            1
        } else {
            self.alloc_in
        }
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Channels each layer uses at one configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceInfo {
    pub layer: usize,
    pub active_in: usize,
    pub active_out: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the current batch's moments (training, calibration).
    BatchStats,
    /// Normalize with calibrated per-configuration statistics.
    Banked(&'a BnStatsBank),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutput {
    /// `[N, classes]`
    pub logits: Tensor,
    /// Output shape of every layer, for diagnostics.
    pub feature_shapes: Vec<Vec<usize>>,
}

enum LayerTape {
    Conv {
        input: Vec<f32>,
        geom: ConvGeom,
        weight: Vec<f32>,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        output: Vec<f32>,
    },
    Linear {
        input: Vec<f32>,
        ci: usize,
        co: usize,
        weight: Vec<f32>,
        /// `(channels, positions)` when the input was globally pooled.
        pooled: Option<(usize, usize)>,
        /// Post-ReLU output of a hidden linear layer.
        output: Option<Vec<f32>>,
    },
}

/// Activations recorded by a training forward, consumed by
/// [`SlimNetwork::backward`].
pub struct Tape {
    batch: usize,
    layers: Vec<LayerTape>,
}

/// Observer of pre-normalization activations `[N, C, P]` per conv layer.
pub type Probe<'p> = &'p mut dyn FnMut(usize, &[f32], [usize; 3]);

/// A weight-shared network: one parameter set serves every configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SlimNetwork {
    spec: ModelSpec,
    geometry: Vec<LayerGeometry>,
    params: Params<f32>,
}

impl SlimNetwork {
    /// Builds a network with He-normal convolution weights, unit BN scales
    /// and zero shifts and biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let geometry = Self::geometry(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = geometry
            .iter()
            .map(|g| {
                let fan_in = g.weight_in() * g.kernel_volume();
                let n = g.alloc_out * fan_in;
                let (std, bn) = if g.kind == LayerKind::Linear {
                    ((1.0 / fan_in as f32).sqrt(), 0)
                } else {
                    ((2.0 / fan_in as f32).sqrt(), g.alloc_out)
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                LayerParams {
                    weight: (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    bias: if g.kind == LayerKind::Linear { vec![0.0; g.alloc_out] } else { Vec::new() },
                    bn_scale: vec![1.0; bn],
                    bn_shift: vec![0.0; bn],
                }
            })
            .collect();
        Ok(Self {
            spec,
            geometry,
            params: Params { layers },
        })
    }

    /// Wraps existing parameters, checking every tensor length.
    pub fn from_params(spec: ModelSpec, params: Params<f32>) -> Result<Self> {
        let net = Self::new(spec, 0)?;
        if params.layers.len() != net.params.layers.len() {
            return Err(Error::Shape {
                stage: "parameter layers",
                expected: vec![net.params.layers.len()],
                actual: vec![params.layers.len()],
            });
        }
        for (a, b) in net.params.layers.iter().zip(&params.layers) {
            let ea: Vec<usize> = a.tensors().iter().map(|t| t.len()).collect();
            let eb: Vec<usize> = b.tensors().iter().map(|t| t.len()).collect();
            if ea != eb {
                return Err(Error::Shape {
                    stage: "parameter tensors",
                    expected: ea,
                    actual: eb,
                });
            }
        }
        Ok(Self { params, ..net })
    }

    fn geometry(spec: &ModelSpec) -> Result<Vec<LayerGeometry>> {
        spec.validate()?;
        let strides = spec.strides()?;
        let hi = spec.width_bounds[1];
        let div = spec.channel_divisor as usize;
        let alloc = |c: u32, scalable: bool| {
            if scalable {
                active_channels_capped(c as usize, hi, hi, div)
            } else {
                c as usize
            }
        };
        Ok(spec
            .layers
            .iter()
            .zip(strides)
            .map(|(l, stride)| LayerGeometry {
                kind: l.kind,
                kernel: [l.kernel_t() as usize, l.kernel as usize, l.kernel as usize],
                stride,
                alloc_in: alloc(l.in_channels, l.in_scalable),
                alloc_out: alloc(l.out_channels, l.out_scalable),
                in_scalable: l.in_scalable,
                out_scalable: l.out_scalable,
                residual: l.residual,
            })
            .collect())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<f32> {
        &mut self.params
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients::zeros_like(&self.params)
    }

    /// Exact channel counts every layer uses at `config`.
    pub fn slice_report(&self, config: &ModelConfig) -> Result<Vec<SliceInfo>> {
        config.check(&self.spec)?;
        Ok(self.active_dims(config.width))
    }

    fn active_dims(&self, width: f64) -> Vec<SliceInfo> {
        let hi = self.spec.width_bounds[1];
        let div = self.spec.channel_divisor as usize;
        self.spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let pick = |c: u32, scalable: bool| {
                    if scalable {
                        active_channels_capped(c as usize, width, hi, div)
                    } else {
                        c as usize
                    }
                };
                SliceInfo {
                    layer: i,
                    active_in: pick(l.in_channels, l.in_scalable),
                    active_out: pick(l.out_channels, l.out_scalable),
                }
            })
            .collect()
    }

    /// Marks every parameter entry a forward at `config` reads.
    pub fn usage_mask(&self, config: &ModelConfig) -> Result<Params<bool>> {
        let dims = self.slice_report(config)?;
        let mut mask = self.params.map(|_| false);
        for ((m, g), d) in mask.layers.iter_mut().zip(&self.geometry).zip(&dims) {
            let (ci, co) = self.weight_slice_dims(g, d);
            let kv = g.kernel_volume();
            for o in 0..co {
                let row = o * g.weight_in() * kv;
                m.weight[row..row + ci * kv].iter_mut().for_each(|x| *x = true);
            }
            let nb = m.bias.len().min(co);
            m.bias[..nb].iter_mut().for_each(|x| *x = true);
            let ns = m.bn_scale.len().min(co);
            m.bn_scale[..ns].iter_mut().for_each(|x| *x = true);
            m.bn_shift[..ns].iter_mut().for_each(|x| *x = true);
        }
        Ok(mask)
    }

    /// `(input channels per filter, filters)` of the active weight slice.
    fn weight_slice_dims(&self, g: &LayerGeometry, d: &SliceInfo) -> (usize, usize) {
        if g.kind == LayerKind::DepthwiseConv2d {
            (1, d.active_out)
        } else {
            (d.active_in, d.active_out)
        }
    }

    fn weight_slice(&self, i: usize, d: &SliceInfo) -> Vec<f32> {
        let g = &self.geometry[i];
        let (ci, co) = self.weight_slice_dims(g, d);
        let kv = g.kernel_volume();
        let full = &self.params.layers[i].weight;
        let mut out = Vec::with_capacity(co * ci * kv);
        for o in 0..co {
            let row = o * g.weight_in() * kv;
            out.extend_from_slice(&full[row..row + ci * kv]);
        }
        out
    }

    fn scatter_weight_grad(&self, i: usize, d: &SliceInfo, slice: &[f32], grads: &mut Gradients) {
        let g = &self.geometry[i];
        let (ci, co) = self.weight_slice_dims(g, d);
        let kv = g.kernel_volume();
        let full = &mut grads.layers[i].weight;
        for o in 0..co {
            let row = o * g.weight_in() * kv;
            let src = &slice[o * ci * kv..(o + 1) * ci * kv];
            full[row..row + ci * kv]
                .iter_mut()
                .zip(src)
                .for_each(|(a, b)| *a += b);
        }
    }

    fn check_input(&self, config: &ModelConfig, input: &Tensor) -> Result<[usize; 5]> {
        config.check(&self.spec)?;
        let dims = input.dims5()?;
        let expected = [
            dims[0],
            self.spec.input_channels(),
            config.frames as usize,
            config.resolution as usize,
            config.resolution as usize,
        ];
        if dims != expected || dims[0] == 0 {
            return Err(Error::Shape {
                stage: "network input",
                expected: expected.to_vec(),
                actual: input.shape().to_vec(),
            });
        }
        Ok(dims)
    }

    /// Inference forward at `config`.
    pub fn forward(&self, config: &ModelConfig, input: &Tensor, bn: BnMode) -> Result<NetworkOutput> {
        self.run(config, input, bn, None, None)
    }

    /// Batch-statistics forward recording what [`Self::backward`] needs.
    pub fn forward_train(&self, config: &ModelConfig, input: &Tensor) -> Result<(NetworkOutput, Tape)> {
        let mut tape = Tape {
            batch: input.batch(),
            layers: Vec::new(),
        };
        let out = self.run(config, input, BnMode::BatchStats, Some(&mut tape), None)?;
        Ok((out, tape))
    }

    /// Forward that reports each conv layer's pre-normalization activations.
    pub fn forward_probe(
        &self,
        config: &ModelConfig,
        input: &Tensor,
        bn: BnMode,
        probe: Probe<'_>,
    ) -> Result<NetworkOutput> {
        self.run(config, input, bn, None, Some(probe))
    }

    fn run(
        &self,
        config: &ModelConfig,
        input: &Tensor,
        bn: BnMode,
        mut tape: Option<&mut Tape>,
        mut probe: Option<Probe<'_>>,
    ) -> Result<NetworkOutput> {
        let [n, c, t, h, w] = self.check_input(config, input)?;
        let dims = self.active_dims(config.width);
        let banked = match bn {
            BnMode::BatchStats => None,
            BnMode::Banked(bank) => Some(
                bank.get(config)
                    .ok_or_else(|| Error::CalibrationRequired(config.key()))?,
            ),
        };
        let mut x = input.data().to_vec();
        let mut shape = [c, t, h, w];
        let mut flat: Option<usize> = None;
        let mut feature_shapes = Vec::with_capacity(dims.len());
        let last = dims.len() - 1;

        for (i, d) in dims.iter().enumerate() {
            let g = &self.geometry[i];
            let p = &self.params.layers[i];
            if g.kind == LayerKind::Linear {
                let (ci, pooled) = match flat {
                    Some(ci) => (ci, None),
                    None => {
                        let pos = shape[1] * shape[2] * shape[3];
                        (shape[0], Some((shape[0], pos)))
                    }
                };
                let feat = match pooled {
                    Some((ch, pos)) => global_avg_pool(&x, n, ch, pos),
                    None => x,
                };
                let weight = self.weight_slice(i, d);
                let mut y = kernels::linear_forward(&feat, n, ci, d.active_out, &weight, &p.bias[..d.active_out]);
                let hidden = i != last;
                if hidden {
                    relu(&mut y);
                }
                if let Some(tape) = tape.as_deref_mut() {
                    tape.layers.push(LayerTape::Linear {
                        input: feat,
                        ci,
                        co: d.active_out,
                        weight,
                        pooled,
                        output: hidden.then(|| y.clone()),
                    });
                }
                x = y;
                flat = Some(d.active_out);
                feature_shapes.push(vec![n, d.active_out]);
                continue;
            }

            let geom = ConvGeom {
                in_channels: d.active_in,
                out_channels: d.active_out,
                depthwise: g.kind == LayerKind::DepthwiseConv2d,
                kernel: g.kernel,
                stride: g.stride,
                pad: [g.kernel[0] / 2, g.kernel[1] / 2, g.kernel[2] / 2],
                input: [shape[1], shape[2], shape[3]],
            };
            debug_assert_eq!(shape[0], d.active_in);
            let weight = self.weight_slice(i, d);
            let z = kernels::conv_forward(&x, n, &geom, &weight);
            let [ot, oh, ow] = geom.output();
            let pos = ot * oh * ow;
            let co = d.active_out;
            if let Some(probe) = probe.as_deref_mut() {
                probe(i, &z, [n, co, pos]);
            }
            let (mean, var) = match banked {
                None => batch_moments(&z, n, co, pos),
                Some(entry) => {
                    let stats = entry.layers.get(i).and_then(Option::as_ref).ok_or_else(|| {
                        Error::CalibrationRequired(config.key())
                    })?;
                    if stats.mean.len() != co {
                        return Err(Error::Shape {
                            stage: "banked BN statistics",
                            expected: vec![co],
                            actual: vec![stats.mean.len()],
                        });
                    }
                    (
                        stats.mean.iter().map(|&v| v as f32).collect(),
                        stats.var.iter().map(|&v| v as f32).collect(),
                    )
                }
            };
            let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = z;
            let mut y = vec![0.0; xhat.len()];
            for s in 0..n {
                for ch in 0..co {
                    let off = (s * co + ch) * pos;
                    let (m, is, gm, bt) = (mean[ch], inv_std[ch], p.bn_scale[ch], p.bn_shift[ch]);
                    for k in off..off + pos {
                        let xh = (xhat[k] - m) * is;
                        xhat[k] = xh;
                        y[k] = gm * xh + bt;
                    }
                }
            }
            if g.residual {
                y.iter_mut().zip(&x).for_each(|(a, b)| *a += b);
            }
            relu(&mut y);
            if let Some(tape) = tape.as_deref_mut() {
                tape.layers.push(LayerTape::Conv {
                    input: std::mem::take(&mut x),
                    geom,
                    weight,
                    xhat,
                    inv_std,
                    output: y.clone(),
                });
            }
            x = y;
            shape = [co, ot, oh, ow];
            feature_shapes.push(vec![n, co, ot, oh, ow]);
        }

        let classes = flat.unwrap_or(0);
        Ok(NetworkOutput {
            logits: Tensor::from_vec(&[n, classes], x)?,
            feature_shapes,
        })
    }

    /// Backpropagates `dlogits` through a recorded forward, accumulating
    /// into the leading slices of `grads`. Entries outside the slices are
    /// never touched.
    pub fn backward(&self, config: &ModelConfig, tape: &Tape, dlogits: &[f32], grads: &mut Gradients) -> Result<()> {
        let dims = self.active_dims(config.width);
        if tape.layers.len() != dims.len() {
            return Err(Error::Shape {
                stage: "backward tape",
                expected: vec![dims.len()],
                actual: vec![tape.layers.len()],
            });
        }
        let n = tape.batch;
        let mut dcur = dlogits.to_vec();
        for (i, lt) in tape.layers.iter().enumerate().rev() {
            let d = &dims[i];
            match lt {
                LayerTape::Linear { input, ci, co, weight, pooled, output } => {
                    if let Some(out) = output {
                        dcur.iter_mut().zip(out).for_each(|(g, o)| {
                            if *o <= 0.0 {
                                *g = 0.0
                            }
                        });
                    }
                    let mut dw = vec![0.0; weight.len()];
                    let gl = &mut grads.layers[i];
                    let dx = kernels::linear_backward(input, n, *ci, *co, weight, &dcur, &mut dw, &mut gl.bias[..*co]);
                    self.scatter_weight_grad(i, d, &dw, grads);
                    dcur = match pooled {
                        Some((ch, pos)) => {
                            let mut full = vec![0.0; n * ch * pos];
                            let inv = 1.0 / *pos as f32;
                            for (k, v) in dx.iter().enumerate() {
                                full[k * pos..(k + 1) * pos].iter_mut().for_each(|f| *f = v * inv);
                            }
                            full
                        }
                        None => dx,
                    };
                }
                LayerTape::Conv { input, geom, weight, xhat, inv_std, output } => {
                    let co = geom.out_channels;
                    let pos: usize = geom.output().iter().product();
                    dcur.iter_mut().zip(output).for_each(|(g, o)| {
                        if *o <= 0.0 {
                            *g = 0.0
                        }
                    });
                    let residual = self.geometry[i].residual.then(|| dcur.clone());
                    let dz = {
                        let gl = &mut grads.layers[i];
                        let scale = &self.params.layers[i].bn_scale;
                        bn_backward(&dcur, xhat, inv_std, &scale[..co], n, co, pos, &mut gl.bn_scale[..co], &mut gl.bn_shift[..co])
                    };
                    let mut dw = vec![0.0; weight.len()];
                    let dx = kernels::conv_backward(input, n, geom, weight, &dz, &mut dw, i > 0);
                    self.scatter_weight_grad(i, d, &dw, grads);
                    if let Some(mut dx) = dx {
                        if let Some(r) = residual {
                            dx.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
                        }
                        dcur = dx;
                    }
                }
            }
        }
        Ok(())
    }
}

/// ReLU that keeps NaN visible to divergence checks.
fn relu(y: &mut [f32]) {
    for v in y {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn global_avg_pool(x: &[f32], n: usize, c: usize, pos: usize) -> Vec<f32> {
    let inv = 1.0 / pos as f32;
    (0..n * c)
        .map(|k| x[k * pos..(k + 1) * pos].iter().sum::<f32>() * inv)
        .collect()
}

/// Per-channel mean and biased variance over `[N, C, P]`.
fn batch_moments(z: &[f32], n: usize, c: usize, pos: usize) -> (Vec<f32>, Vec<f32>) {
    let count = (n * pos) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for smp in 0..n {
            let off = (smp * c + ch) * pos;
            s += z[off..off + pos].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0.0f64;
        for smp in 0..n {
            let off = (smp * c + ch) * pos;
            ss += z[off..off + pos].iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m as f32;
        var[ch] = (ss / count) as f32;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
fn bn_backward(
    dy: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    scale: &[f32],
    n: usize,
    c: usize,
    pos: usize,
    dscale: &mut [f32],
    dshift: &mut [f32],
) -> Vec<f32> {
    let m = (n * pos) as f32;
    let mut dx = vec![0.0; dy.len()];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xh) = (0.0f32, 0.0f32);
        for s in 0..n {
            let off = (s * c + ch) * pos;
            for k in off..off + pos {
                sum_dy += dy[k];
                sum_dy_xh += dy[k] * xhat[k];
            }
        }
        dscale[ch] += sum_dy_xh;
        dshift[ch] += sum_dy;
        let g = scale[ch] * inv_std[ch] / m;
        for s in 0..n {
            let off = (s * c + ch) * pos;
            for k in off..off + pos {
                dx[k] = g * (m * dy[k] - sum_dy - xhat[k] * sum_dy_xh);
            }
        }
    }
    dx
}

/// Resamples an image or clip batch to `resolution` (bilinear, half-pixel
/// centres) and `frames` (uniform index selection). Rank is preserved.
pub fn resize_input(input: &Tensor, resolution: u32, frames: u32) -> Result<Tensor> {
    let [n, c, t, h, w] = input.dims5()?;
    let (r, f) = (resolution as usize, frames as usize);
    if f == 0 || f > t || r == 0 {
        return Err(Error::Shape {
            stage: "input resize",
            expected: vec![n, c, f, r, r],
            actual: input.shape().to_vec(),
        });
    }
    let mut data = kernels::resize_bilinear(input.data(), n * c * t, h, w, r, r);
    if f != t {
        let picks = kernels::frame_indices(t, f);
        data = kernels::select_frames(&data, n * c, t, r * r, &picks);
    }
    let shape: Vec<usize> = if input.shape().len() == 4 {
        vec![n, c, r, r]
    } else {
        vec![n, c, f, r, r]
    };
    Tensor::from_vec(&shape, data)
}
