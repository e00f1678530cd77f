use mutualnet::net3d::{fusion_shapes, FeatureShape, FusionConsumer};
use mutualnet::{
    adaptive_fuse, archs, fusion_input_slicing, sample_3d_configs, AdaptiveFusion, Error, ModelConfig, SamplingSpec,
    Tensor, TwoBranchSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn dims(s: &FeatureShape, n: usize) -> [usize; 5] {
    [n, s.channels, s.frames, s.side, s.side]
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn grid(spec: &TwoBranchSpec) -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for w in [0.5, 0.75, 1.0] {
        for r in [16, 24, 28, 32] {
            for t in [2, 4, 6, 8] {
                out.push(ModelConfig::with_frames(w, r, t));
            }
        }
    }
    assert!(out.contains(&ModelConfig::full(&spec.slow)));
    out
}

#[test]
fn fused_shapes_follow_the_scaling_rule() {
    let spec = archs::tiny_slowfast();
    for &layer in &spec.fusion_points {
        let slow_layer = &spec.slow.layers[layer];
        let (c, t, s) = (
            slow_layer.out_channels as f64,
            slow_layer.output_temporal as f64,
            slow_layer.output_spatial[0] as f64,
        );
        let fusion = AdaptiveFusion::new(&spec, layer, 1).unwrap();
        let fast_shape = [2, (spec.beta * c) as usize, spec.alpha as usize * t as usize, s as usize, s as usize];
        let fast = random(&fast_shape, 2);
        for cfg in grid(&spec) {
            let (gw, gs, gt) = (cfg.width, cfg.resolution as f64 / 32.0, cfg.frames as f64 / 8.0);
            let shapes = fusion_shapes(&spec, layer, &cfg).unwrap();
            let slow = random(&dims(&shapes.slow, 2), 3);
            let fused = adaptive_fuse(&slow, &fast, &cfg, &fusion).unwrap();
            // {γt·T, (γs·S)², (γw + 2β)·C}; every grid width makes γw·C a multiple of the divisor
            let expect = [
                2,
                ((gw + 2.0 * spec.beta) * c).round() as usize,
                round_half_up(gt * t),
                round_half_up(gs * s),
                round_half_up(gs * s),
            ];
            assert_eq!(fused.shape(), &expect, "layer {layer} {cfg}");

            let plan = fusion_input_slicing(c as usize, gw, (2.0 * spec.beta * c) as usize, &fusion.scaling);
            assert_eq!(plan.len(), expect[1]);
            assert_eq!(plan.slow, 0..(gw * c).round() as usize);
            assert_eq!(plan.fast, c as usize..(c * (1.0 + 2.0 * spec.beta)) as usize);

            let consumer = FusionConsumer::new(&fusion.point, c as usize, [3, 3, 3], fusion.scaling, 4);
            let y = consumer.forward(&fused, gw).unwrap();
            assert_eq!(y.shape()[1], (gw * c).round() as usize);
        }
    }
}

/// Time-strided `5×1²` convolution evaluated with plain loops, appended
/// after the Slow channels: the lateral connection without any resampling.
fn reference_lateral(fusion: &AdaptiveFusion, slow: &Tensor, fast: &Tensor) -> Vec<f64> {
    let [n, sc, t, h, w] = slow.dims5().unwrap();
    let [_, fc, ft, _, _] = fast.dims5().unwrap();
    let lc = fusion.point.lateral_channels();
    let alpha = fusion.alpha;
    let mut out = Vec::new();
    for s in 0..n {
        let per = sc * t * h * w;
        out.extend(slow.data()[s * per..(s + 1) * per].iter().map(|&v| v as f64));
        for o in 0..lc {
            for a in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for ci in 0..fc {
                            for dt in 0..5 {
                                let it = (a * alpha + dt) as isize - 2;
                                if it < 0 || it >= ft as isize {
                                    continue;
                                }
                                let xi = (((s * fc + ci) * ft + it as usize) * h + y) * w + x;
                                acc += fusion.weight[(o * fc + ci) * 5 + dt] as f64 * fast.data()[xi] as f64;
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn identity_config_equals_plain_lateral_connection() {
    let spec = archs::tiny_slowfast();
    let full = ModelConfig::full(&spec.slow);
    for &layer in &spec.fusion_points {
        let fusion = AdaptiveFusion::new(&spec, layer, 10 + layer as u64).unwrap();
        let shapes = fusion.shapes(&full);
        let slow = random(&dims(&shapes.slow, 3), 11);
        let fast = random(&dims(&shapes.fast, 3), 12);
        let fused = fusion.fuse(&slow, &fast, &full).unwrap();
        let reference = reference_lateral(&fusion, &slow, &fast);
        let dev = fused
            .data()
            .iter()
            .zip(&reference)
            .map(|(&a, b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert_eq!(fused.len(), reference.len());
        assert!(dev <= 1e-6, "layer {layer}: deviation {dev}");
    }
}

#[test]
fn fast_features_are_config_independent() {
    let spec = archs::tiny_slowfast();
    let layer = spec.fusion_points[1];
    let fusion = AdaptiveFusion::new(&spec, layer, 1).unwrap();
    let fast = random(&dims(&fusion.shapes(&ModelConfig::full(&spec.slow)).fast, 2), 5);
    let lateral = fusion.lateral(&fast).unwrap();
    let mut trailing = None;
    for w in [0.5, 0.75, 1.0] {
        let cfg = ModelConfig::with_frames(w, 24, 4);
        let shapes = fusion.shapes(&cfg);
        assert_eq!(dims(&shapes.fast, 2).as_slice(), fast.shape());
        assert_eq!(fusion.lateral(&fast).unwrap(), lateral);
        let fused = fusion.fuse(&random(&dims(&shapes.slow, 2), 6), &fast, &cfg).unwrap();
        let [n, c, t, h, ww] = fused.dims5().unwrap();
        let lc = shapes.lateral.channels;
        let per = t * h * ww;
        let tail: Vec<f32> = (0..n)
            .flat_map(|s| fused.data()[(s * c + c - lc) * per..(s + 1) * c * per].to_vec())
            .collect();
        match &trailing {
            None => trailing = Some(tail),
            Some(prev) => assert_eq!(prev, &tail),
        }
    }
}

#[test]
fn consumer_reads_exactly_the_planned_columns() {
    let spec = archs::tiny_slowfast();
    let fusion = AdaptiveFusion::new(&spec, 5, 1).unwrap();
    let cfg = ModelConfig::with_frames(0.5, 32, 8);
    let shapes = fusion.shapes(&cfg);
    let fused = fusion
        .fuse(&random(&dims(&shapes.slow, 1), 2), &random(&dims(&shapes.fast, 1), 3), &cfg)
        .unwrap();
    let consumer = FusionConsumer::new(&fusion.point, 32, [3, 3, 3], fusion.scaling, 4);
    let plan = consumer.plan(0.5);
    let before = consumer.forward(&fused, 0.5).unwrap();
    let kv = 27;
    let mut off_plan = consumer.clone();
    for o in 0..32 {
        for col in plan.slow.end..plan.fast.start {
            let base = (o * plan.total_columns + col) * kv;
            off_plan.weight[base..base + kv].iter_mut().for_each(|v| *v = 1e3);
        }
    }
    assert_eq!(off_plan.forward(&fused, 0.5).unwrap(), before);
    let mut reserved = consumer.clone();
    reserved.weight[plan.fast.start * kv] += 1.0;
    assert_ne!(reserved.forward(&fused, 0.5).unwrap(), before);
}

#[test]
fn shape_errors_name_the_stage() {
    let spec = archs::tiny_slowfast();
    let fusion = AdaptiveFusion::new(&spec, 3, 1).unwrap();
    let cfg = ModelConfig::with_frames(0.5, 24, 4);
    let shapes = fusion.shapes(&cfg);
    let slow = random(&dims(&shapes.slow, 1), 1);
    let fast = random(&dims(&shapes.fast, 1), 2);
    let mut bad_fast = dims(&shapes.fast, 1);
    bad_fast[2] -= 1;
    match fusion.fuse(&slow, &random(&bad_fast, 3), &cfg) {
        Err(Error::Shape { stage, .. }) => assert!(stage.contains("fast")),
        other => panic!("{other:?}"),
    }
    let mut bad_slow = dims(&shapes.slow, 1);
    bad_slow[1] += 1;
    match fusion.fuse(&random(&bad_slow, 4), &fast, &cfg) {
        Err(Error::Shape { stage, .. }) => assert!(stage.contains("slow")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn joint_sampling_covers_the_temporal_set() {
    let mut s = SamplingSpec {
        width_lower: 0.5,
        width_upper: 1.0,
        n_random: 2,
        resolution_set: vec![32, 24],
        temporal_set: vec![8, 4, 2],
        seed: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..200 {
        let plan = sample_3d_configs(&s, &mut rng).unwrap();
        assert_eq!(plan.entries.len(), 4);
        assert_eq!(plan.entries[0].config, ModelConfig::with_frames(1.0, 32, 8));
        seen.extend(plan.entries[1..].iter().map(|e| e.config.frames));
    }
    assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![2, 4, 8]);
    s.temporal_set.clear();
    assert!(matches!(sample_3d_configs(&s, &mut rng), Err(Error::Config(_))));
}

#[test]
fn two_branch_spec_round_trips_through_json() {
    let spec = archs::tiny_slowfast();
    let json = serde_json::to_string(&spec).unwrap();
    let back: TwoBranchSpec = serde_json::from_str(&json).unwrap();
    assert_eq!(back, spec);
    back.validate().unwrap();
}
