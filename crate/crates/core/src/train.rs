//! Mutual training: sandwich sampling of configurations, full-network
//! supervision with labels, sub-network distillation from the detached
//! full-network prediction, and gradient accumulation across
//! configurations before a single optimizer update.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::slim::{resize_input, Gradients, SlimNetwork};
use crate::space::{ModelConfig, SamplingSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    GroundTruth,
    DistillFromFull,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub config: ModelConfig,
    pub supervision: Supervision,
}

/// Configurations trained in one iteration. Entry 0 is the full network
/// at the largest resolution with label supervision, entry 1 the lower
/// width bound, then the random widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationPlan {
    pub entries: Vec<PlanEntry>,
}

impl IterationPlan {
    /// Same plan with every sub-network trained on labels instead of the
    /// full network's prediction.
    pub fn with_label_supervised_subs(mut self) -> Self {
        for e in self.entries.iter_mut().skip(1) {
            e.supervision = Supervision::GroundTruth;
        }
        self
    }
}

/// Draws the sandwich plan: full, lower bound and `n_random` uniform widths
/// in `(lower, upper)`. Sub-network resolutions and frame counts are drawn
/// independently, with replacement.
pub fn sample_iteration_configs<R: Rng + ?Sized>(sampling: &SamplingSpec, rng: &mut R) -> Result<IterationPlan> {
    sampling.validate()?;
    let (lo, hi) = (sampling.width_lower, sampling.width_upper);
    let mut entries = Vec::with_capacity(2 + sampling.n_random);
    entries.push(PlanEntry {
        config: ModelConfig::with_frames(hi, sampling.max_resolution(), sampling.max_frames()),
        supervision: Supervision::GroundTruth,
    });
    let sub = |rng: &mut R, width: f64| PlanEntry {
        config: ModelConfig::with_frames(
            width,
            *sampling.resolution_set.choose(rng).expect("nonempty"),
            *sampling.temporal_set.choose(rng).expect("nonempty"),
        ),
        supervision: Supervision::DistillFromFull,
    };
    entries.push(sub(rng, lo));
    for _ in 0..sampling.n_random {
        let w = if hi > lo { rng.random_range(lo..hi) } else { lo };
        entries.push(sub(rng, w));
    }
    Ok(IterationPlan { entries })
}

fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if m == f64::INFINITY {
        let k = row.iter().filter(|v| **v == f32::INFINITY).count() as f64;
        return row
            .iter()
            .map(|&v| if v == f32::INFINITY { -k.ln() } else { f64::NEG_INFINITY })
            .collect();
    }
    let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

fn classes_of(logits: &Tensor) -> Result<(usize, usize)> {
    match *logits.shape() {
        [n, c] if c > 0 => Ok((n, c)),
        _ => Err(Error::Shape {
            stage: "logits",
            expected: vec![0, 0],
            actual: logits.shape().to_vec(),
        }),
    }
}

/// Batch-averaged softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f32>)> {
    let (n, c) = classes_of(logits)?;
    if labels.len() != n {
        return Err(Error::Shape {
            stage: "labels",
            expected: vec![n],
            actual: vec![labels.len()],
        });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0f32; n * c];
    for (s, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Label { label: y, classes: c });
        }
        let lp = log_softmax_row(&logits.data()[s * c..(s + 1) * c]);
        loss -= lp[y];
        for k in 0..c {
            let p = lp[k].exp();
            let t = if k == y { 1.0 } else { 0.0 };
            grad[s * c + k] = ((p - t) / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Loss of the full network against labels.
pub fn full_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy(logits, labels)?.0)
}

/// `KL(softmax(teacher) ‖ softmax(student))`, batch-averaged, temperature 1,
/// and its gradient w.r.t. the student logits only.
pub fn kl_divergence(student: &Tensor, teacher: &Tensor) -> Result<(f64, Vec<f32>)> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape {
            stage: "distillation logits",
            expected: teacher.shape().to_vec(),
            actual: student.shape().to_vec(),
        });
    }
    let (n, c) = classes_of(student)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0f32; n * c];
    for s in 0..n {
        let lq = log_softmax_row(&student.data()[s * c..(s + 1) * c]);
        let lp = log_softmax_row(&teacher.data()[s * c..(s + 1) * c]);
        for k in 0..c {
            let p = lp[k].exp();
            if p > 0.0 {
                loss += p * (lp[k] - lq[k]);
            }
            grad[s * c + k] = ((lq[k].exp() - p) / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Distillation loss of a sub-network against the full network's logits.
pub fn distill_loss(sub_logits: &Tensor, full_logits: &Tensor) -> Result<f64> {
    Ok(kl_divergence(sub_logits, full_logits)?.0)
}

fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(s, &y)| argmax(&logits.data()[s * c..(s + 1) * c]) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Momentum SGD. Weight decay applies to convolution and linear weights,
/// not to biases or normalization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub steps: u64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            steps: 0,
            velocity: None,
        }
    }

    pub fn velocity(&self) -> Option<&Gradients> {
        self.velocity.as_ref()
    }

    pub fn set_velocity(&mut self, v: Option<Gradients>) {
        self.velocity = v;
    }

    pub fn step(&mut self, net: &mut SlimNetwork, grads: &Gradients) {
        let velocity = self
            .velocity
            .get_or_insert_with(|| Gradients::zeros_like(net.params()));
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        for ((p, g), v) in net
            .params_mut()
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut velocity.layers)
        {
            let groups = p.tensors_mut().into_iter().zip(g.tensors()).zip(v.tensors_mut());
            for (k, ((pt, gt), vt)) in groups.enumerate() {
                let decay = if k == 0 { wd } else { 0.0 };
                for ((w, g), v) in pt.iter_mut().zip(gt).zip(vt.iter_mut()) {
                    *v = mu * *v + g + decay * *w;
                    *w -= lr * *v;
                }
            }
        }
        self.steps += 1;
    }
}

/// Cosine learning-rate decay with optional linear warmup.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f32,
    pub total_steps: u64,
    #[serde(default)]
    pub warmup_steps: u64,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: u64) -> f32 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f32 / self.warmup_steps as f32;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = (step - self.warmup_steps).min(span) as f64 / span as f64;
        (0.5 * self.base_lr as f64 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub iteration: u64,
    pub configs: Vec<ModelConfig>,
    pub loss_full: f64,
    pub loss_sub: Vec<f64>,
    pub total: f64,
    /// Batch top-1 accuracy per configuration, in plan order.
    pub accuracy: Vec<f64>,
    pub lr: f32,
}

/// Runs every plan entry forward and backward, accumulating into `grads`.
/// The full network's logits are detached before serving as targets.
pub fn accumulate_plan_gradients(
    net: &SlimNetwork,
    batch: &Batch,
    plan: &IterationPlan,
    grads: &mut Gradients,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty training batch".into()));
    }
    let mut teacher: Option<Tensor> = None;
    let mut loss_full = 0.0;
    let mut loss_sub = Vec::with_capacity(plan.entries.len().saturating_sub(1));
    let mut accuracy = Vec::with_capacity(plan.entries.len());
    for (k, entry) in plan.entries.iter().enumerate() {
        let cfg = &entry.config;
        let x = resize_input(&batch.images, cfg.resolution, cfg.frames)?;
        let (out, tape) = net.forward_train(cfg, &x).map_err(|e| e.at(cfg.key()))?;
        let (loss, dlogits) = match (k, entry.supervision) {
            (0, _) | (_, Supervision::GroundTruth) => cross_entropy(&out.logits, &batch.labels)?,
            (_, Supervision::DistillFromFull) => {
                let t = teacher.as_ref().expect("full network runs first");
                kl_divergence(&out.logits, t)?
            }
        };
        net.backward(cfg, &tape, &dlogits, grads)?;
        accuracy.push(batch_accuracy(&out.logits, &batch.labels));
        if k == 0 {
            loss_full = loss;
            teacher = Some(out.logits);
        } else {
            loss_sub.push(loss);
        }
    }
    Ok((loss_full, loss_sub, accuracy))
}

/// Executes one plan: accumulate gradients over all entries, then take a
/// single optimizer step. Non-finite losses abort before the update.
pub fn run_plan(net: &mut SlimNetwork, batch: &Batch, plan: &IterationPlan, opt: &mut Sgd) -> Result<TrainMetrics> {
    let mut grads = net.zero_grads();
    let (loss_full, loss_sub, accuracy) = accumulate_plan_gradients(net, batch, plan, &mut grads)?;
    let total = loss_full + loss_sub.iter().sum::<f64>();
    let iteration = opt.steps;
    if !total.is_finite() {
        return Err(Error::Divergence {
            iteration,
            detail: format!("loss_full = {loss_full}, loss_sub = {loss_sub:?}"),
        });
    }
    if grads.layers.iter().flat_map(|l| l.tensors()).flatten().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            iteration,
            detail: "non-finite gradient".into(),
        });
    }
    opt.step(net, &grads);
    Ok(TrainMetrics {
        iteration,
        configs: plan.entries.iter().map(|e| e.config).collect(),
        loss_full,
        loss_sub,
        total,
        accuracy,
        lr: opt.lr,
    })
}

/// One mutual-learning iteration with a freshly sampled plan.
pub fn train_step<R: Rng + ?Sized>(
    net: &mut SlimNetwork,
    batch: &Batch,
    sampling: &SamplingSpec,
    opt: &mut Sgd,
    rng: &mut R,
) -> Result<TrainMetrics> {
    let plan = sample_iteration_configs(sampling, rng)?;
    run_plan(net, batch, &plan, opt)
}

/// Conventional full-width training on one randomly drawn resolution per
/// iteration (multi-scale augmentation, no sub-networks, no KL term). A
/// single-element resolution set is plain training.
pub fn multiscale_baseline_step<R: Rng + ?Sized>(
    net: &mut SlimNetwork,
    batch: &Batch,
    resolution_set: &[u32],
    opt: &mut Sgd,
    rng: &mut R,
) -> Result<TrainMetrics> {
    let r = *resolution_set
        .choose(rng)
        .ok_or_else(|| Error::Config("empty resolution set".into()))?;
    let spec = net.spec();
    let plan = IterationPlan {
        entries: vec![PlanEntry {
            config: ModelConfig::with_frames(spec.width_bounds[1], r, spec.base_frames),
            supervision: Supervision::GroundTruth,
        }],
    };
    run_plan(net, batch, &plan, opt)
}

/// Outcome of comparing accumulated gradients with isolated per-config
/// gradients on the two weight regions of a narrow/wide pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    /// Entries read by the narrow config (also read by the wide one).
    pub shared_params: usize,
    /// Entries read only by the wide config.
    pub disjoint_params: usize,
    /// `max|acc − (g_narrow + g_wide)| / max|g_narrow + g_wide|` on the shared region.
    pub shared_rel_dev: f64,
    /// `max|acc − g_wide| / max|g_wide|` on the disjoint region.
    pub disjoint_rel_dev: f64,
    /// `max|g_narrow|` on the disjoint region; zero by slice independence.
    pub narrow_leak: f64,
    /// `max|acc|` outside everything the wide config reads.
    pub outside_leak: f64,
}

impl DecompositionReport {
    pub fn holds(&self, rel_tol: f64) -> bool {
        self.shared_rel_dev <= rel_tol
            && self.disjoint_rel_dev <= rel_tol
            && self.narrow_leak == 0.0
            && self.outside_leak == 0.0
    }
}

/// Checks that the accumulated gradient of a two-config iteration splits
/// into the narrow config's contribution plus the wide config's, with the
/// wide-only slice driven by the wide config alone. Both configs see the
/// same batch (resized) and are supervised by its labels.
pub fn gradient_decomposition_check(
    net: &SlimNetwork,
    batch: &Batch,
    narrow: ModelConfig,
    wide: ModelConfig,
) -> Result<DecompositionReport> {
    if narrow.width > wide.width {
        return Err(Error::Config(format!("{narrow} is wider than {wide}")));
    }
    let entry = |config| PlanEntry {
        config,
        supervision: Supervision::GroundTruth,
    };
    let isolated = |cfg| -> Result<Gradients> {
        let mut g = net.zero_grads();
        let plan = IterationPlan { entries: vec![entry(cfg)] };
        accumulate_plan_gradients(net, batch, &plan, &mut g)?;
        Ok(g)
    };
    let g_narrow = isolated(narrow)?.flat();
    let g_wide = isolated(wide)?.flat();
    let mut acc = net.zero_grads();
    let plan = IterationPlan {
        entries: vec![entry(narrow), entry(wide)],
    };
    accumulate_plan_gradients(net, batch, &plan, &mut acc)?;
    let acc = acc.flat();
    let m_narrow = net.usage_mask(&narrow)?.flat();
    let m_wide = net.usage_mask(&wide)?.flat();

    let (mut shared, mut disjoint) = (0, 0);
    let (mut sh_dev, mut sh_mag, mut dj_dev, mut dj_mag) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut leak, mut outside) = (0.0f64, 0.0f64);
    for i in 0..acc.len() {
        let (a, gn, gw) = (acc[i] as f64, g_narrow[i] as f64, g_wide[i] as f64);
        if m_narrow[i] {
            shared += 1;
            sh_dev = sh_dev.max((a - (gn + gw)).abs());
            sh_mag = sh_mag.max((gn + gw).abs());
        } else if m_wide[i] {
            disjoint += 1;
            dj_dev = dj_dev.max((a - gw).abs());
            dj_mag = dj_mag.max(gw.abs());
            leak = leak.max(gn.abs());
        } else {
            outside = outside.max(a.abs());
        }
    }
    let rel = |dev: f64, mag: f64| if mag > 0.0 { dev / mag } else { dev };
    Ok(DecompositionReport {
        shared_params: shared,
        disjoint_params: disjoint,
        shared_rel_dev: rel(sh_dev, sh_mag),
        disjoint_rel_dev: rel(dj_dev, dj_mag),
        narrow_leak: leak,
        outside_leak: outside,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mobilenet_sampling() -> SamplingSpec {
        SamplingSpec {
            width_lower: 0.25,
            width_upper: 1.0,
            n_random: 2,
            resolution_set: vec![224, 192, 160, 128],
            temporal_set: vec![1],
            seed: 7,
        }
    }

    #[test]
    fn sandwich_plan_structure() {
        let s = mobilenet_sampling();
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let plan = sample_iteration_configs(&s, &mut rng).unwrap();
        assert_eq!(plan.entries.len(), 4);
        assert_eq!(plan.entries[0].config, ModelConfig::new(1.0, 224));
        assert_eq!(plan.entries[0].supervision, Supervision::GroundTruth);
        assert_eq!(plan.entries[1].config.width, 0.25);
        for e in &plan.entries[1..] {
            assert_eq!(e.supervision, Supervision::DistillFromFull);
            assert!(s.resolution_set.contains(&e.config.resolution));
        }
        for e in &plan.entries[2..] {
            assert!(e.config.width > 0.25 && e.config.width < 1.0);
        }
    }

    #[test]
    fn plans_replay_under_a_fixed_seed() {
        let s = mobilenet_sampling();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..5).map(|_| sample_iteration_configs(&s, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn degenerate_plan() {
        let s = SamplingSpec {
            width_lower: 1.0,
            width_upper: 1.0,
            n_random: 0,
            resolution_set: vec![32],
            temporal_set: vec![1],
            seed: 0,
        };
        let plan = sample_iteration_configs(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(plan.entries.len(), 2);
        assert_eq!(plan.entries[0].config, plan.entries[1].config);
    }

    fn logits(rows: &[&[f32]]) -> Tensor {
        let c = rows[0].len();
        Tensor::from_vec(&[rows.len(), c], rows.concat()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let u = logits(&[&[0.0; 10]]);
        assert!((full_loss(&u, &[3]).unwrap() - 10f64.ln()).abs() < 1e-12);
        let mut peaked = [0.0f32; 10];
        peaked[2] = f32::INFINITY;
        assert_eq!(full_loss(&logits(&[&peaked]), &[2]).unwrap(), 0.0);
        // [1, 2, 0.5] label 1: -ln(e^2 / (e + e^2 + e^0.5))
        let l = full_loss(&logits(&[&[1.0, 2.0, 0.5]]), &[1]).unwrap();
        let e = -(2f64.exp() / (1f64.exp() + 2f64.exp() + 0.5f64.exp())).ln();
        assert!((l - e).abs() < 1e-7);
        assert!(matches!(full_loss(&u, &[10]), Err(Error::Label { .. })));
    }

    #[test]
    fn kl_examples() {
        let a = logits(&[&[0.3, -1.0, 2.0]]);
        assert_eq!(distill_loss(&a, &a).unwrap(), 0.0);
        let mut peak = [0.0f32; 10];
        peak[0] = 1e4;
        let kl = distill_loss(&logits(&[&[0.0; 10]]), &logits(&[&peak])).unwrap();
        assert!((kl - 10f64.ln()).abs() < 1e-9);
        // p = softmax(teacher), q = softmax(student), Σ p ln(p/q)
        let t = [1.0f64, 0.0, -1.0];
        let s = [0.0f64, 0.5, 0.0];
        let sm = |v: &[f64]| {
            let z: f64 = v.iter().map(|x| x.exp()).sum();
            v.iter().map(|x| x.exp() / z).collect::<Vec<_>>()
        };
        let (p, q) = (sm(&t), sm(&s));
        let expect: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
        let got = distill_loss(&logits(&[&[0.0, 0.5, 0.0]]), &logits(&[&[1.0, 0.0, -1.0]])).unwrap();
        assert!((got - expect).abs() < 1e-7);
        let bad = distill_loss(&logits(&[&[0.0, 0.0]]), &a);
        assert!(matches!(bad, Err(Error::Shape { .. })));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let base = [0.2f32, -0.4, 1.1, 0.05];
        let teacher = logits(&[&[0.5, 0.1, -0.3, 0.9]]);
        let (_, g_ce) = cross_entropy(&logits(&[&base]), &[2]).unwrap();
        let (_, g_kl) = kl_divergence(&logits(&[&base]), &teacher).unwrap();
        let eps = 1e-3f32;
        for k in 0..4 {
            let mut p = base;
            p[k] += eps;
            let mut m = base;
            m[k] -= eps;
            let fd_ce = (full_loss(&logits(&[&p]), &[2]).unwrap() - full_loss(&logits(&[&m]), &[2]).unwrap()) / (2.0 * eps as f64);
            let fd_kl = (distill_loss(&logits(&[&p]), &teacher).unwrap() - distill_loss(&logits(&[&m]), &teacher).unwrap()) / (2.0 * eps as f64);
            assert!((fd_ce - g_ce[k] as f64).abs() < 1e-4);
            assert!((fd_kl - g_kl[k] as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = CosineSchedule { base_lr: 0.1, total_steps: 100, warmup_steps: 0 };
        assert!((s.lr_at(0) - 0.1).abs() < 1e-7);
        assert!((s.lr_at(50) - 0.05).abs() < 1e-6);
        assert!(s.lr_at(100).abs() < 1e-7);
    }
}
