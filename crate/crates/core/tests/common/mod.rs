#![allow(dead_code)]

use mutualnet::calibrate::BnStatsEntry;
use mutualnet::slim::Params;
use mutualnet::{Batch, LayerSpec, ModelSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Three stride-2 convolutions over 192×192 inputs.
pub fn toy_convnet() -> ModelSpec {
    ModelSpec {
        name: "toy_convnet".into(),
        layers: vec![
            LayerSpec::conv2d(3, 3, 10, 96).fixed_input(),
            LayerSpec::conv2d(3, 10, 10, 48),
            LayerSpec::conv2d(3, 10, 20, 24),
            LayerSpec::linear(20, 4).fixed_output(),
        ],
        base_resolution: 192,
        base_frames: 1,
        width_bounds: [0.25, 1.0],
        channel_divisor: 1,
    }
}

/// Every 2D layer kind: strided conv, depthwise, pointwise, residual,
/// a hidden linear layer and the classifier.
pub fn mixed_net() -> ModelSpec {
    ModelSpec {
        name: "mixed".into(),
        layers: vec![
            LayerSpec::conv2d(3, 3, 8, 8).fixed_input(),
            LayerSpec::depthwise(3, 8, 8),
            LayerSpec::conv2d(1, 8, 12, 8),
            LayerSpec::conv2d(3, 12, 12, 8).with_residual(),
            LayerSpec::depthwise(3, 12, 4),
            LayerSpec::conv2d(1, 12, 16, 4),
            LayerSpec::linear(16, 12),
            LayerSpec::linear(12, 5).fixed_output(),
        ],
        base_resolution: 16,
        base_frames: 1,
        width_bounds: [0.25, 1.0],
        channel_divisor: 2,
    }
}

/// Small residual 3D network.
pub fn toy_3d() -> ModelSpec {
    ModelSpec {
        name: "toy_3d".into(),
        layers: vec![
            LayerSpec::conv3d(3, 3, 3, 6, 8, 4).fixed_input(),
            LayerSpec::conv3d(3, 3, 6, 6, 8, 4).with_residual(),
            LayerSpec::conv3d(3, 1, 6, 10, 4, 2),
            LayerSpec::linear(10, 3).fixed_output(),
        ],
        base_resolution: 16,
        base_frames: 8,
        width_bounds: [0.25, 1.0],
        channel_divisor: 1,
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn random_batches(shape: &[usize], classes: usize, count: usize, seed: u64) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let images = random_tensor(shape, seed.wrapping_mul(1000) + k as u64);
            let labels = (0..shape[0]).map(|_| rng.random_range(0..classes)).collect();
            Batch::new(images, labels)
        })
        .collect()
}

/// Randomizes BN affine parameters and linear biases so they matter.
pub fn perturb_affine(params: &mut Params<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &mut params.layers {
        for v in l.bn_scale.iter_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in l.bn_shift.iter_mut().chain(l.bias.iter_mut()) {
            *v = rng.random_range(-0.3..0.3);
        }
    }
}

/// A conventional full-width network evaluated with plain nested loops in
/// f64, reading weights in the `[out, in, kt, kh, kw]` layout. BN uses the
/// batch's moments unless `stats` is given.
pub fn reference_forward(spec: &ModelSpec, params: &Params<f32>, input: &Tensor, stats: Option<&BnStatsEntry>) -> Vec<f64> {
    let shape = input.shape();
    let n = shape[0];
    let (mut c, mut t, mut h, mut w) = if shape.len() == 4 {
        (shape[1], 1, shape[2], shape[3])
    } else {
        (shape[1], shape[2], shape[3], shape[4])
    };
    let mut x: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let strides = spec.strides().unwrap();
    let mut flat = false;
    let last = spec.layers.len() - 1;
    for (i, l) in spec.layers.iter().enumerate() {
        let p = &params.layers[i];
        let co = l.out_channels as usize;
        if l.kind == mutualnet::LayerKind::Linear {
            if !flat {
                let pos = t * h * w;
                x = (0..n * c).map(|k| x[k * pos..(k + 1) * pos].iter().sum::<f64>() / pos as f64).collect();
                flat = true;
            }
            let ci = l.in_channels as usize;
            let mut y = vec![0.0; n * co];
            for s in 0..n {
                for o in 0..co {
                    let mut acc = p.bias[o] as f64;
                    for k in 0..ci {
                        acc += p.weight[o * ci + k] as f64 * x[s * ci + k];
                    }
                    y[s * co + o] = if i != last { acc.max(0.0) } else { acc };
                }
            }
            x = y;
            c = co;
            continue;
        }
        let depthwise = l.kind == mutualnet::LayerKind::DepthwiseConv2d;
        let (kt, k) = (l.kernel_t() as usize, l.kernel as usize);
        let [st, sh, sw] = strides[i];
        let (pt, ph) = (kt / 2, k / 2);
        let ot = (t + 2 * pt - kt) / st + 1;
        let oh = (h + 2 * ph - k) / sh + 1;
        let ow = (w + 2 * ph - k) / sw + 1;
        let cin_per = if depthwise { 1 } else { c };
        let pos = ot * oh * ow;
        let mut z = vec![0.0; n * co * pos];
        for s in 0..n {
            for o in 0..co {
                for a in 0..ot {
                    for b in 0..oh {
                        for d in 0..ow {
                            let mut acc = 0.0;
                            for r in 0..cin_per {
                                let ch = if depthwise { o } else { r };
                                for dt in 0..kt {
                                    for dh in 0..k {
                                        for dw in 0..k {
                                            let it = (a * st + dt) as isize - pt as isize;
                                            let ih = (b * sh + dh) as isize - ph as isize;
                                            let iw = (d * sw + dw) as isize - ph as isize;
                                            if it < 0 || ih < 0 || iw < 0 || it >= t as isize || ih >= h as isize || iw >= w as isize {
                                                continue;
                                            }
                                            let xi = (((s * c + ch) * t + it as usize) * h + ih as usize) * w + iw as usize;
                                            let wi = ((o * cin_per + r) * kt + dt) * k * k + dh * k + dw;
                                            acc += p.weight[wi] as f64 * x[xi];
                                        }
                                    }
                                }
                            }
                            z[((s * co + o) * ot + a) * oh * ow + b * ow + d] = acc;
                        }
                    }
                }
            }
        }
        for o in 0..co {
            let vals = (0..n).flat_map(|s| z[(s * co + o) * pos..(s * co + o + 1) * pos].iter().copied());
            let (mean, var) = match stats {
                Some(e) => {
                    let st = e.layers[i].as_ref().unwrap();
                    (st.mean[o], st.var[o])
                }
                None => {
                    let v: Vec<f64> = vals.collect();
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    (m, v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64)
                }
            };
            let inv = 1.0 / (var + 1e-5).sqrt();
            for s in 0..n {
                for q in 0..pos {
                    let idx = (s * co + o) * pos + q;
                    z[idx] = p.bn_scale[o] as f64 * (z[idx] - mean) * inv + p.bn_shift[o] as f64;
                }
            }
        }
        if l.residual {
            z.iter_mut().zip(&x).for_each(|(a, b)| *a += b);
        }
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        x = z;
        (c, t, h, w) = (co, ot, oh, ow);
    }
    x
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}
