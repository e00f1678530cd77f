mod common;

use common::*;
use mutualnet::calibrate::{BnLayerStats, BnStatsEntry};
use mutualnet::slim::{active_channels_capped, LayerParams, Params};
use mutualnet::{archs, calibrate_all, BnMode, BnStatsBank, LayerSpec, ModelConfig, ModelSpec, SlimNetwork, Tensor};
use proptest::prelude::*;

#[test]
fn full_width_matches_conventional_network() {
    for (spec, shape) in [
        (mixed_net(), vec![3, 3, 16, 16]),
        (toy_3d(), vec![2, 3, 8, 16, 16]),
        (archs::cifar_convnet(), vec![2, 3, 32, 32]),
    ] {
        let mut net = SlimNetwork::new(spec.clone(), 5).unwrap();
        perturb_affine(net.params_mut(), 6);
        let x = random_tensor(&shape, 7);
        let cfg = ModelConfig::full(&spec);
        let out = net.forward(&cfg, &x, BnMode::BatchStats).unwrap();
        let reference = reference_forward(&spec, net.params(), &x, None);
        let dev = max_abs_diff(out.logits.data(), &reference);
        assert!(dev <= 1e-6, "{}: batch-stats deviation {dev}", spec.name);

        let data = random_batches(&shape, 5, 2, 8);
        let bank = calibrate_all(&net, &[cfg], &data, 2).unwrap();
        let out = net.forward(&cfg, &x, BnMode::Banked(&bank)).unwrap();
        let reference = reference_forward(&spec, net.params(), &x, bank.get(&cfg));
        let dev = max_abs_diff(out.logits.data(), &reference);
        assert!(dev <= 1e-6, "{}: banked deviation {dev}", spec.name);
    }
}

/// Overwrites every parameter entry the config does not read.
fn scramble_outside(net: &mut SlimNetwork, cfg: &ModelConfig) {
    let mask = net.usage_mask(cfg).unwrap();
    for (l, m) in net.params_mut().layers.iter_mut().zip(&mask.layers) {
        for (t, tm) in l.tensors_mut().into_iter().zip(m.tensors()) {
            for (k, (v, used)) in t.iter_mut().zip(tm).enumerate() {
                if !used {
                    *v = 1e3 * ((k % 7) as f32 - 3.0);
                }
            }
        }
    }
}

#[test]
fn parameters_outside_the_slice_have_no_influence() {
    for (spec, shape, width) in [
        (archs::cifar_convnet(), vec![4, 3, 32, 32], 0.5),
        (mixed_net(), vec![4, 3, 16, 16], 0.5),
        (toy_3d(), vec![2, 3, 8, 16, 16], 0.5),
        (mixed_net(), vec![4, 3, 16, 16], 0.3),
    ] {
        let net = SlimNetwork::new(spec.clone(), 1).unwrap();
        let cfg = ModelConfig::with_frames(width, spec.base_resolution, spec.base_frames);
        let data = random_batches(&shape, spec.num_classes(), 3, 2);
        let bank = calibrate_all(&net, &[cfg], &data, 3).unwrap();
        let x = random_tensor(&shape, 3);
        let before = net.forward(&cfg, &x, BnMode::Banked(&bank)).unwrap();

        let mut perturbed = net.clone();
        scramble_outside(&mut perturbed, &cfg);
        assert_ne!(&perturbed, &net);
        let after = perturbed.forward(&cfg, &x, BnMode::Banked(&bank)).unwrap();
        assert_eq!(before.logits.data(), after.logits.data(), "{}", spec.name);
        let rebank = calibrate_all(&perturbed, &[cfg], &data, 3).unwrap();
        assert_eq!(rebank, bank, "{}: calibration changed", spec.name);
    }
}

/// conv 1×1 (2 → 4 channels) on a single pixel, then a linear 4 → 2
/// classifier, evaluated at half width with hand-set statistics.
#[test]
fn toy_two_layer_forward_by_hand() {
    let spec = ModelSpec {
        name: "two_layer".into(),
        layers: vec![LayerSpec::conv2d(1, 2, 4, 1).fixed_input(), LayerSpec::linear(4, 2).fixed_output()],
        base_resolution: 1,
        base_frames: 1,
        width_bounds: [0.25, 1.0],
        channel_divisor: 1,
    };
    let params = Params {
        layers: vec![
            LayerParams {
                weight: vec![1.0, 2.0, -1.0, 0.5, 9.0, 9.0, 9.0, 9.0],
                bias: vec![],
                bn_scale: vec![2.0, 1.0, 7.0, 7.0],
                bn_shift: vec![0.5, -1.0, 7.0, 7.0],
            },
            LayerParams {
                weight: vec![1.0, -2.0, 9.0, 9.0, 0.5, 3.0, 9.0, 9.0],
                bias: vec![0.25, -0.5],
                bn_scale: vec![],
                bn_shift: vec![],
            },
        ],
    };
    let net = SlimNetwork::from_params(spec, params).unwrap();
    let cfg = ModelConfig::new(0.5, 1);
    let mut bank = BnStatsBank::default();
    bank.insert(
        cfg.key(),
        BnStatsEntry {
            layers: vec![
                Some(BnLayerStats {
                    mean: vec![1.0, -2.0],
                    var: vec![4.0 - 1e-5, 1.0 - 1e-5],
                }),
                None,
            ],
            batches: 1,
            samples: 1,
        },
    );
    let x = Tensor::from_vec(&[1, 2, 1, 1], vec![3.0, -1.0]).unwrap();
    let out = net.forward(&cfg, &x, BnMode::Banked(&bank)).unwrap();
    // z = [1·3 + 2·(−1), −1·3 + 0.5·(−1)] = [1, −3.5]
    // bn: [2·(1 − 1)/2 + 0.5, 1·(−3.5 + 2)/1 − 1] = [0.5, −2.5] → relu [0.5, 0]
    // logits: [1·0.5 − 2·0 + 0.25, 0.5·0.5 + 3·0 − 0.5] = [0.75, −0.25]
    let expect = [0.75f32, -0.25];
    for (a, b) in out.logits.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn slice_report_matches_layer_specs() {
    for spec in [archs::mobilenet_v1(), archs::cifar_convnet(), archs::tiny_slow3d(), mixed_net()] {
        let net = SlimNetwork::new(spec.clone(), 0).unwrap();
        let (lo, hi) = (spec.width_bounds[0], spec.width_bounds[1]);
        let div = spec.channel_divisor as f64;
        for step in 0..=20 {
            let w = lo + (hi - lo) * step as f64 / 20.0;
            let cfg = ModelConfig::with_frames(w, spec.base_resolution, spec.base_frames);
            let report = net.slice_report(&cfg).unwrap();
            for (info, l) in report.iter().zip(&spec.layers) {
                let brute = |c: u32, scalable: bool| {
                    if !scalable {
                        return c as usize;
                    }
                    let snap = |g: f64| ((g * c as f64 / div + 0.5).floor() * div).max(div);
                    snap(w).min(snap(hi)) as usize
                };
                assert_eq!(info.active_in, brute(l.in_channels, l.in_scalable), "{} layer {}", spec.name, info.layer);
                assert_eq!(info.active_out, brute(l.out_channels, l.out_scalable), "{} layer {}", spec.name, info.layer);
            }
        }
    }
}

#[test]
fn logits_shape_is_config_independent() {
    let spec = mixed_net();
    let net = SlimNetwork::new(spec.clone(), 0).unwrap();
    for w in [0.25, 0.5, 0.77, 1.0] {
        for r in [8, 12, 16] {
            let x = random_tensor(&[2, 3, r, r], 1);
            let out = net.forward(&ModelConfig::new(w, r as u32), &x, BnMode::BatchStats).unwrap();
            assert_eq!(out.logits.shape(), &[2, 5]);
        }
    }
}

proptest! {
    #[test]
    fn narrower_configs_read_a_subset(a in 0.25f64..=1.0, b in 0.25f64..=1.0) {
        let net = SlimNetwork::new(archs::cifar_convnet(), 0).unwrap();
        let (lo, hi) = if a <= b { (a.max(0.5), b.max(0.5)) } else { (b.max(0.5), a.max(0.5)) };
        let m_lo = net.usage_mask(&ModelConfig::new(lo, 32)).unwrap().flat();
        let m_hi = net.usage_mask(&ModelConfig::new(hi, 32)).unwrap().flat();
        prop_assert!(m_lo.iter().zip(&m_hi).all(|(x, y)| !x || *y));
    }

    #[test]
    fn active_channels_is_monotone_and_bounded(c in 1usize..2048, div in 1usize..16, a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
        prop_assume!(div <= c);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let x = active_channels_capped(c, lo, 1.0, div);
        let y = active_channels_capped(c, hi, 1.0, div);
        prop_assert!(x <= y);
        prop_assert!(x >= div && x.is_multiple_of(div) || x == active_channels_capped(c, 1.0, 1.0, div));
        prop_assert!(y <= active_channels_capped(c, 1.0, 1.0, div));
    }
}
