//! Teacher pretraining, student training, distillation, evaluation and the
//! fusion ablation.
//!
//! A training step runs one sample at a time; a batch averages the gradients
//! of its samples before a momentum step. Under distillation the frozen
//! teacher's depth map and normalized saliency maps are computed once per
//! training sample up front, which is equivalent to recomputing them each
//! step because the teacher never changes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::autodiff::Graph;
use crate::depthdist::{d2kd_loss_with_target, teacher_distribution, BinSpec, TeacherDistribution};
use crate::error::{Error, Result};
use crate::metrics::{MetricsAccumulator, MetricsReport, DEFAULT_CAPS};
use crate::model::{radar_input, DepthNet, Forward, LayerId, ModelSpec};
use crate::nn::Params;
use crate::rng::Rng;
use crate::saliency::{
    gradcam_weights, saliency_map, student_weights, unit_maps, xkd_loss_fixed_weights, SaliencyMap, Source,
};
use crate::supervision::{depth_loss, total_loss, LossWeights, SupervisionPair};
use crate::synthetic::{generate_scene, Scene, SceneParams};
use crate::tensor::Tensor;

/// A training or evaluation input in network layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `3 x H x W`.
    pub image: Tensor,
    /// `2 x H x W`, see [`radar_input`].
    pub radar: Tensor,
    pub sup: SupervisionPair,
}

impl Sample {
    pub fn new(image: Tensor, radar_depth: &Tensor, sup: SupervisionPair) -> Result<Self> {
        let radar = radar_input(radar_depth)?;
        if image.shape()[1..] != radar.shape()[1..] || radar.shape()[1..] != *sup.dd.shape() {
            return Err(Error::ShapeIncompatible(image.shape().to_vec(), sup.dd.shape().to_vec()));
        }
        Ok(Self { image, radar, sup })
    }

    pub fn from_scene(scene: &Scene) -> Result<Self> {
        Self::new(scene.image.clone(), &scene.radar_depth, scene.sup.clone())
    }
}

pub fn samples(scenes: &[Scene]) -> Result<Vec<Sample>> {
    scenes.iter().map(Sample::from_scene).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub weights: LossWeights,
    pub bins: BinSpec,
    pub layers: Vec<LayerId>,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip applied before the momentum update; 0 disables.
    pub clip_norm: f64,
    /// Seeds the per-epoch sample order.
    pub seed: u64,
    pub caps: Vec<f64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            bins: BinSpec::default(),
            layers: LayerId::DEFAULT_SET.to_vec(),
            lr: 1e-3,
            momentum: 0.9,
            epochs: 30,
            batch_size: 8,
            clip_norm: 10.0,
            seed: 42,
            caps: DEFAULT_CAPS.to_vec(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.bins.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("need lr > 0 and momentum in [0, 1)".into()));
        }
        if !(self.clip_norm >= 0.0) || !self.clip_norm.is_finite() {
            return Err(Error::InvalidArgument("clip norm must be finite and non-negative".into()));
        }
        if self.caps.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::InvalidArgument("caps must be positive".into()));
        }
        Ok(())
    }
}

/// Mean per-sample losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub depth: f64,
    pub xkd: f64,
    pub d2kd: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLosses>,
    /// One report per configured cap, on the evaluation split.
    pub metrics: Vec<MetricsReport>,
    pub param_count: usize,
    pub param_checksum: u64,
    /// Teacher parameter checksum before and after, when distilling.
    pub teacher_checksum: Option<(u64, u64)>,
    /// Filled in by callers that have a clock; not part of the computation.
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// The report with timing cleared, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        Self { wall_time_secs: 0.0, ..self.clone() }
    }

    pub fn metrics_at(&self, cap: f64) -> Option<&MetricsReport> {
        self.metrics.iter().find(|m| m.cap == cap)
    }
}

/// What the frozen teacher contributes for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    pub depth: Tensor,
    /// Normalized flattened saliency maps, one per distilled layer.
    pub maps: Vec<Tensor>,
}

/// Teacher targets of one training sample, ready for the loss.
#[derive(Debug, Clone, PartialEq)]
struct CachedTargets {
    maps: Vec<Tensor>,
    dist: TeacherDistribution,
}

impl CachedTargets {
    fn new(teacher: &DepthNet, sample: &Sample, cfg: &DistillConfig) -> Result<Self> {
        let t = teacher_targets(teacher, sample, &cfg.layers)?;
        let dist = teacher_distribution(&t.depth, &cfg.bins, &sample.sup.dd_mask())?;
        Ok(Self { maps: t.maps, dist })
    }
}

/// Forward pass with frozen parameters and `layers` watched.
fn frozen_forward(model: &DepthNet, g: &mut Graph, sample: &Sample, layers: &[LayerId]) -> Result<Forward> {
    let b = model.params().bind(g, false);
    let image = g.constant(sample.image.clone());
    let radar = g.constant(sample.radar.clone());
    model.forward(g, &b, image, radar, layers)
}

pub fn teacher_targets(teacher: &DepthNet, sample: &Sample, layers: &[LayerId]) -> Result<TeacherTargets> {
    let mut g = Graph::new();
    let fwd = frozen_forward(teacher, &mut g, sample, layers)?;
    let phi = g.mean(fwd.depth);
    let feats: Vec<_> = layers.iter().map(|&l| fwd.layer(l)).collect();
    let maps = unit_maps(&g, &feats, phi)?;
    Ok(TeacherTargets { depth: g.value(fwd.depth).clone(), maps })
}

pub fn predict(model: &DepthNet, sample: &Sample) -> Result<Tensor> {
    let mut g = Graph::new();
    let fwd = frozen_forward(model, &mut g, sample, &[])?;
    Ok(g.value(fwd.depth).clone())
}

/// Metrics pooled over all pixels of all samples, against the dense ground truth.
pub fn evaluate(model: &DepthNet, samples: &[Sample], caps: &[f64]) -> Result<Vec<MetricsReport>> {
    let mut accs: Vec<_> = caps.iter().map(|&c| MetricsAccumulator::new(c)).collect();
    for s in samples {
        let pred = predict(model, s)?;
        let mask = s.sup.dd_mask();
        for acc in &mut accs {
            acc.add(&pred, &s.sup.dd, &mask)?;
        }
    }
    accs.iter().map(|a| a.finish()).collect()
}

/// Raw (unnormalized) Grad-CAM maps of `layers` for one sample.
pub fn saliency_maps(model: &DepthNet, sample: &Sample, layers: &[LayerId], source: Source) -> Result<Vec<SaliencyMap>> {
    let mut g = Graph::new();
    let fwd = frozen_forward(model, &mut g, sample, layers)?;
    let phi = g.mean(fwd.depth);
    let feats: Vec<_> = layers.iter().map(|&l| fwd.layer(l)).collect();
    let grads = g.gradients(phi, &feats)?;
    layers
        .iter()
        .zip(feats.iter().zip(&grads))
        .map(|(&layer, (&f, grad))| {
            let alpha = gradcam_weights(g.value(f), grad)?;
            Ok(SaliencyMap { values: saliency_map(g.value(f), &alpha)?, layer, source })
        })
        .collect()
}

/// Mean over samples of the cosine between student and teacher normalized
/// maps, per layer.
pub fn saliency_alignment(student: &DepthNet, teacher: &DepthNet, samples: &[Sample], layers: &[LayerId]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let mut sums = vec![0.0; layers.len()];
    for s in samples {
        let t = teacher_targets(teacher, s, layers)?;
        let st = teacher_targets(student, s, layers)?;
        for (acc, (a, b)) in sums.iter_mut().zip(st.maps.iter().zip(&t.maps)) {
            *acc += crate::saliency::alignment(a, b);
        }
    }
    Ok(sums.into_iter().map(|v| v / samples.len() as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct StepLosses {
    depth: f64,
    xkd: f64,
    d2kd: f64,
    total: f64,
}

/// Objective of one sample and its gradient for every student parameter.
fn student_step(
    model: &DepthNet,
    sample: &Sample,
    cfg: &DistillConfig,
    targets: Option<&CachedTargets>,
) -> Result<(StepLosses, Vec<Tensor>)> {
    let mut g = Graph::new();
    let b = model.params().bind(&mut g, true);
    let image = g.constant(sample.image.clone());
    let radar = g.constant(sample.radar.clone());
    let fwd = model.forward(&mut g, &b, image, radar, &[])?;
    let depth = depth_loss(&mut g, fwd.depth, &sample.sup)?;
    let (xkd, d2kd, total) = match targets {
        Some(t) => {
            let phi = g.mean(fwd.depth);
            let feats: Vec<_> = cfg.layers.iter().map(|&l| fwd.layer(l)).collect();
            let alphas = student_weights(&g, &feats, phi)?;
            let xkd = xkd_loss_fixed_weights(&mut g, &feats, &alphas, &t.maps)?;
            let d2kd = d2kd_loss_with_target(&mut g, &t.dist, fwd.depth)?;
            let total = total_loss(&mut g, depth, xkd, d2kd, &cfg.weights)?;
            (g.value(xkd).item(), g.value(d2kd).item(), total)
        }
        None => (0.0, 0.0, g.scale(depth, cfg.weights.depth)),
    };
    g.backward(total)?;
    let losses = StepLosses { depth: g.value(depth).item(), xkd, d2kd, total: g.value(total).item() };
    let grads = b
        .vars()
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    Ok((losses, grads))
}

/// Heavy-ball update `v = m v + grad; p -= lr v`.
#[derive(Debug, Clone)]
struct Momentum {
    velocity: Vec<Tensor>,
}

impl Momentum {
    fn new(params: &Params) -> Self {
        Self { velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }

    fn step(&mut self, params: &mut Params, grads: &[Tensor], lr: f64, momentum: f64) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((w, vel), &d) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vel = momentum * *vel + d;
                *w -= lr * *vel;
            }
        }
    }
}

pub fn train(
    model: &mut DepthNet,
    data: &[Sample],
    eval: &[Sample],
    cfg: &DistillConfig,
    teacher: Option<&DepthNet>,
) -> Result<TrainReport> {
    train_with(model, data, eval, cfg, teacher, &mut |_, _| {})
}

/// [`train`] with a callback after each epoch (epoch index from 0).
pub fn train_with(
    model: &mut DepthNet,
    data: &[Sample],
    eval: &[Sample],
    cfg: &DistillConfig,
    teacher: Option<&DepthNet>,
    on_epoch: &mut dyn FnMut(usize, &EpochLosses),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if teacher.is_some() && cfg.layers.is_empty() {
        return Err(Error::NoDistillLayers);
    }
    let before = teacher.map(|t| t.params().checksum());
    let targets = match teacher {
        Some(t) => Some(data.iter().map(|s| CachedTargets::new(t, s, cfg)).collect::<Result<Vec<_>>>()?),
        None => None,
    };

    let mut opt = Momentum::new(model.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = Rng::stream(cfg.seed, 7);
    let mut initial: Option<f64> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sums = [0.0; 4];
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            let mut batch_total = 0.0;
            for &i in batch {
                let (l, grads) = student_step(model, &data[i], cfg, targets.as_ref().map(|t| &t[i]))?;
                if ![l.depth, l.xkd, l.d2kd, l.total].iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("training loss"));
                }
                for (s, v) in sums.iter_mut().zip([l.depth, l.xkd, l.d2kd, l.total]) {
                    *s += v;
                }
                batch_total += l.total;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                                *p += q;
                            }
                        }
                    }
                }
            }
            let batch_total = batch_total / batch.len() as f64;
            let first = *initial.get_or_insert(batch_total);
            if batch_total > 10.0 * first {
                return Err(Error::Divergence { epoch, loss: batch_total, initial: first });
            }
            let mut grads = acc.expect("non-empty batch");
            let mut scale = 1.0 / batch.len() as f64;
            if cfg.clip_norm > 0.0 {
                let norm = scale * libm::sqrt(grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>());
                if norm > cfg.clip_norm {
                    scale *= cfg.clip_norm / norm;
                }
            }
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            opt.step(model.params_mut(), &grads, cfg.lr, cfg.momentum);
        }
        let n = data.len() as f64;
        let e = EpochLosses { depth: sums[0] / n, xkd: sums[1] / n, d2kd: sums[2] / n, total: sums[3] / n };
        on_epoch(epoch, &e);
        epochs.push(e);
    }
    if model.params().iter().any(|p| !p.value.is_finite()) {
        return Err(Error::NonFinite("parameters"));
    }

    let teacher_checksum = match (teacher, before) {
        (Some(t), Some(b)) => {
            let after = t.params().checksum();
            if after != b {
                return Err(Error::Verification("teacher parameters changed during distillation".into()));
            }
            Some((b, after))
        }
        _ => None,
    };
    let metrics = if eval.is_empty() { Vec::new() } else { evaluate(model, eval, &cfg.caps)? };
    Ok(TrainReport {
        epochs,
        metrics,
        param_count: model.param_count(),
        param_checksum: model.params().checksum(),
        teacher_checksum,
        wall_time_secs: 0.0,
    })
}

/// Rows of the fusion ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationKind {
    Add,
    Concat,
    /// Sigmoid channel gate computed from radar features (stand-in).
    Attention,
    Film,
    FilmNoDaspp,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] =
        [AblationKind::Add, AblationKind::Concat, AblationKind::Attention, AblationKind::Film, AblationKind::FilmNoDaspp];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::Add => "add",
            AblationKind::Concat => "concat",
            AblationKind::Attention => "attention",
            AblationKind::Film => "film",
            AblationKind::FilmNoDaspp => "film_no_daspp",
        }
    }

    /// `base` with this row's fusion and DASPP setting.
    pub fn spec(self, base: &ModelSpec) -> ModelSpec {
        use crate::model::FusionKind;
        let mut s = base.clone();
        s.fusion = match self {
            AblationKind::Add => FusionKind::Add,
            AblationKind::Concat => FusionKind::Concat,
            AblationKind::Attention => FusionKind::Attention,
            AblationKind::Film | AblationKind::FilmNoDaspp => FusionKind::Film,
        };
        if self == AblationKind::FilmNoDaspp {
            s.daspp = None;
        } else if s.daspp.is_none() {
            s.daspp = Some(Default::default());
        }
        s
    }
}

impl FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s || (s == "concatenate" && *k == AblationKind::Concat))
            .ok_or_else(|| Error::UnknownFusion(s.into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub kind: AblationKind,
    pub param_count: usize,
    pub report: TrainReport,
}

/// Trains one student of the given kind without distillation. The model is
/// initialized from `cfg.seed`.
pub fn ablation_run(kind: AblationKind, base: &ModelSpec, data: &[Sample], eval: &[Sample], cfg: &DistillConfig) -> Result<AblationRow> {
    let mut model = DepthNet::new(&kind.spec(base), cfg.seed)?;
    let report = train(&mut model, data, eval, cfg, None)?;
    Ok(AblationRow { kind, param_count: model.param_count(), report })
}

pub fn ablate_fusion(kinds: &[AblationKind], base: &ModelSpec, data: &[Sample], eval: &[Sample], cfg: &DistillConfig) -> Result<Vec<AblationRow>> {
    kinds.iter().map(|&k| ablation_run(k, base, data, eval, cfg)).collect()
}

/// Full objective with the student Grad-CAM weights held at `alphas`.
fn objective_with_weights(model: &DepthNet, sample: &Sample, t: &CachedTargets, alphas: &[Tensor], cfg: &DistillConfig) -> Result<(Graph, Vec<crate::Var>, crate::Var)> {
    let mut g = Graph::new();
    let b = model.params().bind(&mut g, true);
    let image = g.constant(sample.image.clone());
    let radar = g.constant(sample.radar.clone());
    let fwd = model.forward(&mut g, &b, image, radar, &[])?;
    let depth = depth_loss(&mut g, fwd.depth, &sample.sup)?;
    let feats: Vec<_> = cfg.layers.iter().map(|&l| fwd.layer(l)).collect();
    let xkd = xkd_loss_fixed_weights(&mut g, &feats, alphas, &t.maps)?;
    let d2kd = d2kd_loss_with_target(&mut g, &t.dist, fwd.depth)?;
    let total = total_loss(&mut g, depth, xkd, d2kd, &cfg.weights)?;
    Ok((g, b.vars().to_vec(), total))
}

/// Finite-difference check of the full distillation objective of a student on
/// one 32x32 scene against a narrow teacher. One entry of every parameter
/// tensor is probed. The student's Grad-CAM weights are held at their values
/// at the unperturbed parameters, matching how the training gradient treats
/// them. Returns the worst `|a - n| / max(1, |n|)`.
pub fn composed_gradcheck(seed: u64, h: f64) -> Result<f64> {
    let scene = generate_scene(seed, 32, 32, &SceneParams::default())?;
    let sample = Sample::from_scene(&scene)?;
    let student = DepthNet::new(&ModelSpec::student(), seed)?;
    let teacher = DepthNet::new(&ModelSpec::student().widened(2), seed ^ 0x5eed)?;
    let cfg = DistillConfig::default();
    let targets = CachedTargets::new(&teacher, &sample, &cfg)?;

    let alphas = {
        let mut g = Graph::new();
        let fwd = frozen_forward(&student, &mut g, &sample, &cfg.layers)?;
        let phi = g.mean(fwd.depth);
        let feats: Vec<_> = cfg.layers.iter().map(|&l| fwd.layer(l)).collect();
        student_weights(&g, &feats, phi)?
    };
    let (mut g, vars, total) = objective_with_weights(&student, &sample, &targets, &alphas, &cfg)?;
    g.backward(total)?;

    let mut rng = Rng::stream(seed, 11);
    let mut worst: f64 = 0.0;
    for (index, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*var)));
        let k = rng.below(0, analytic.len());
        let value_at = |delta: f64| -> Result<f64> {
            let mut m = student.clone();
            let p = m.params_mut().iter_mut().nth(index).expect("parameter index");
            p.value.data_mut()[k] += delta;
            let (g, _, total) = objective_with_weights(&m, &sample, &targets, &alphas, &cfg)?;
            Ok(g.value(total).item())
        };
        let numeric = (value_at(h)? - value_at(-h)?) / (2.0 * h);
        let err = libm::fabs(analytic.data()[k] - numeric) / libm::fabs(numeric).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Readable one-line description of a report's final epoch and 80 m metrics.
pub fn summary(report: &TrainReport) -> String {
    let last = report.epochs.last();
    let mae = report.metrics.iter().find(|m| m.cap == 80.0).map(|m| m.mae);
    format!(
        "epochs={} final_total={:.6} mae80={} params={}",
        report.epochs.len(),
        last.map_or(f64::NAN, |e| e.total),
        mae.map_or_else(|| "n/a".into(), |v| format!("{v:.4}")),
        report.param_count
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::dataset;

    fn tiny(n: usize, seed: u64) -> Vec<Sample> {
        let p = SceneParams::default();
        dataset(seed, n, 32, 64, &p).map(|s| Sample::from_scene(&s?)).collect::<Result<_>>().unwrap()
    }

    fn quick() -> DistillConfig {
        DistillConfig { epochs: 2, batch_size: 2, ..Default::default() }
    }

    #[test]
    fn zero_distill_weights_match_plain_training() {
        let data = tiny(4, 100);
        let teacher = DepthNet::new(&ModelSpec::student().widened(2), 3).unwrap();
        let mut plain = DepthNet::new(&ModelSpec::student(), 1).unwrap();
        let mut zeroed = plain.clone();
        let cfg = quick();
        train(&mut plain, &data, &[], &cfg, None).unwrap();
        let cfg0 = DistillConfig { weights: LossWeights { depth: 1.0, xkd: 0.0, d2kd: 0.0 }, ..cfg };
        train(&mut zeroed, &data, &[], &cfg0, Some(&teacher)).unwrap();
        assert_eq!(plain.params(), zeroed.params());
        assert_eq!(plain.params().checksum(), zeroed.params().checksum());
    }

    #[test]
    fn distillation_keeps_teacher_and_decomposes_total() {
        let data = tiny(3, 200);
        let teacher = DepthNet::new(&ModelSpec::student().widened(2), 3).unwrap();
        let sum = teacher.params().checksum();
        let mut student = DepthNet::new(&ModelSpec::student(), 1).unwrap();
        let cfg = quick();
        let r = train(&mut student, &data, &data, &cfg, Some(&teacher)).unwrap();
        assert_eq!(teacher.params().checksum(), sum);
        assert_eq!(r.teacher_checksum, Some((sum, sum)));
        for e in &r.epochs {
            assert!((e.total - cfg.weights.combine(e.depth, e.xkd, e.d2kd)).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&e.xkd) && e.d2kd >= 0.0);
        }
        assert_eq!(r.metrics.len(), 3);
    }

    #[test]
    fn deterministic_reports() {
        let data = tiny(2, 300);
        let run = || {
            let mut m = DepthNet::new(&ModelSpec::student(), 9).unwrap();
            train(&mut m, &data, &data, &quick(), None).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_guard_trips() {
        // Ground truth far above the initial 10 m output, so a huge step overshoots upward.
        let mut data = tiny(2, 400);
        for s in &mut data {
            let far = Tensor::full(s.sup.dd.shape(), 60.0);
            s.sup = SupervisionPair::new(far.clone(), far).unwrap();
        }
        let mut m = DepthNet::new(&ModelSpec::student(), 2).unwrap();
        let cfg = DistillConfig { lr: 1e3, epochs: 2, batch_size: 1, ..Default::default() };
        match train(&mut m, &data, &[], &cfg, None) {
            Err(Error::Divergence { loss, initial, .. }) => assert!(loss > 10.0 * initial),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn ablation_kinds_parse_and_order() {
        assert_eq!("film_no_daspp".parse::<AblationKind>().unwrap(), AblationKind::FilmNoDaspp);
        assert!("gated".parse::<AblationKind>().is_err());
        let base = ModelSpec::student();
        let count = |k: AblationKind| DepthNet::new(&k.spec(&base), 0).unwrap().param_count();
        assert!(count(AblationKind::Concat) > count(AblationKind::Add));
        assert!(count(AblationKind::Film) > count(AblationKind::FilmNoDaspp));
    }

    #[test]
    fn saliency_maps_are_non_negative() {
        let data = tiny(1, 500);
        let m = DepthNet::new(&ModelSpec::student(), 4).unwrap();
        let maps = saliency_maps(&m, &data[0], &LayerId::DEFAULT_SET, Source::Student).unwrap();
        assert_eq!(maps.len(), 3);
        for map in maps {
            assert_eq!(map.values.shape(), &[2, 4]);
            assert!(map.values.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn composed_gradient_matches_finite_differences() {
        let err = composed_gradcheck(1, crate::gradcheck::STEP).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
