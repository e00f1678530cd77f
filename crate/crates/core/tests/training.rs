mod common;

use common::*;
use mutualnet::train::multiscale_baseline_step;
use mutualnet::{archs, train_step, Batch, Error, ModelConfig, SamplingSpec, Sgd, SlimNetwork, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Images whose mean intensity per channel encodes the label.
fn separable_batch(n: usize, res: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.5).unwrap();
    let mut data = Vec::with_capacity(n * 3 * res * res);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..3);
        labels.push(y);
        for c in 0..3 {
            let mean = if c == y { 1.0 } else { -0.5 };
            data.extend((0..res * res).map(|_| mean + noise.sample(&mut rng)));
        }
    }
    Batch::new(Tensor::from_vec(&[n, 3, res, res], data).unwrap(), labels)
}

fn three_class_net() -> mutualnet::ModelSpec {
    let mut spec = archs::cifar_convnet();
    spec.name = "cifar_convnet_3".into();
    let last = spec.layers.len() - 1;
    spec.layers[last] = mutualnet::LayerSpec::linear(128, 3).fixed_output();
    spec
}

#[test]
fn degenerate_sampling_is_conventional_training() {
    let spec = archs::cifar_convnet();
    let sampling = SamplingSpec {
        width_lower: 1.0,
        width_upper: 1.0,
        n_random: 0,
        resolution_set: vec![32],
        temporal_set: vec![1],
        seed: 0,
    };
    let mut a = SlimNetwork::new(spec.clone(), 4).unwrap();
    let mut b = a.clone();
    let (mut oa, mut ob) = (Sgd::new(0.05, 0.9, 5e-4), Sgd::new(0.05, 0.9, 5e-4));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, batch) in random_batches(&[4, 3, 32, 32], 10, 3, 2).iter().enumerate() {
        let m = train_step(&mut a, batch, &sampling, &mut oa, &mut rng).unwrap();
        assert_eq!(m.loss_sub, vec![0.0], "step {k}");
        multiscale_baseline_step(&mut b, batch, &[32], &mut ob, &mut rng).unwrap();
        assert_eq!(a, b, "step {k}");
    }
}

#[test]
fn mutual_learning_fits_a_separable_problem() {
    let spec = three_class_net();
    let sampling = SamplingSpec {
        width_lower: 0.5,
        width_upper: 1.0,
        n_random: 2,
        resolution_set: vec![32, 28, 24, 20],
        temporal_set: vec![1],
        seed: 0,
    };
    let mut net = SlimNetwork::new(spec, 0).unwrap();
    let mut opt = Sgd::new(0.05, 0.9, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut first = None;
    let mut last = 0.0;
    for step in 0..25 {
        let m = train_step(&mut net, &separable_batch(16, 32, step), &sampling, &mut opt, &mut rng).unwrap();
        assert_eq!(m.configs.len(), 4);
        first.get_or_insert(m.loss_full);
        last = m.loss_full;
    }
    assert!(last < 0.5 * first.unwrap(), "loss {} -> {last}", first.unwrap());

    let calib: Vec<Batch> = (100..104).map(|s| separable_batch(16, 32, s)).collect();
    let configs = [ModelConfig::new(0.5, 20), ModelConfig::new(1.0, 32)];
    let bank = mutualnet::calibrate_all(&net, &configs, &calib, 4).unwrap();
    let val: Vec<Batch> = (200..204).map(|s| separable_batch(16, 32, s)).collect();
    let acc = mutualnet::evaluate_grid(&net, &bank, &val, &configs).unwrap();
    assert!(acc.rows.iter().all(|r| r.accuracy > 0.8), "{acc:?}");
}

#[test]
fn non_finite_loss_aborts_before_the_update() {
    let mut net = SlimNetwork::new(archs::cifar_convnet(), 0).unwrap();
    let before = net.clone();
    let mut batch = random_batches(&[2, 3, 32, 32], 10, 1, 0).remove(0);
    batch.images.data_mut()[5] = f32::NAN;
    let sampling = SamplingSpec {
        width_lower: 0.5,
        width_upper: 1.0,
        n_random: 1,
        resolution_set: vec![32],
        temporal_set: vec![1],
        seed: 0,
    };
    let mut opt = Sgd::new(0.1, 0.9, 0.0);
    let err = train_step(&mut net, &batch, &sampling, &mut opt, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::Divergence { iteration: 0, .. }), "{err}");
    assert_eq!(net, before);
    assert_eq!(opt.steps, 0);
}

#[test]
fn training_replays_under_a_fixed_seed() {
    let sampling = SamplingSpec {
        width_lower: 0.5,
        width_upper: 1.0,
        n_random: 2,
        resolution_set: vec![32, 24],
        temporal_set: vec![1],
        seed: 3,
    };
    let run = || {
        let mut net = SlimNetwork::new(archs::cifar_convnet(), 9).unwrap();
        let mut opt = Sgd::new(0.05, 0.9, 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let metrics: Vec<_> = random_batches(&[4, 3, 32, 32], 10, 3, 8)
            .iter()
            .map(|b| train_step(&mut net, b, &sampling, &mut opt, &mut rng).unwrap())
            .collect();
        (net, metrics)
    };
    assert_eq!(run(), run());
}
