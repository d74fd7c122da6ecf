//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The benchmark criteria (6, 8, 9) train a teacher and ten students on the
//! full 200-scene split; expect this target to take the better part of an hour
//! on one core.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use xdkd::config::RunConfig;
use xdkd::dataset::{write_dataset, SceneFiles};
use xdkd::{ablation, checkpoint, xtd};
use xdkd_core::depthdist::{d2kd_loss, make_bins, BinSpec, PROB_FLOOR};
use xdkd_core::harness::{saliency_alignment, samples, train, AblationKind, DistillConfig, Sample, TrainReport};
use xdkd_core::metrics::{eval_metrics, MetricsReport, MIN_PRED};
use xdkd_core::model::{DepthNet, LayerId, ModelSpec};
use xdkd_core::rng::Rng;
use xdkd_core::saliency::{xkd_loss, SaliencyBundle, EPS};
use xdkd_core::supervision::{depth_loss, total_loss, LossWeights, SupervisionPair};
use xdkd_core::synthetic::{dataset, Scene, SceneParams, DEFAULT_HEIGHT, DEFAULT_WIDTH, EVAL_SEEDS, TRAIN_SEEDS};
use xdkd_core::{Graph, Tensor, Var};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fmt_err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- criterion 1

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_xdkd")).arg("gradcheck").output().map_err(fmt_err)?;
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut worst: (f64, String) = (0.0, String::new());
    let mut rows = 0;
    for line in stdout.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err: f64 = fields.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| format!("unparsable line `{line}`"))?;
        rows += 1;
        if err >= worst.0 {
            worst = (err, fields[0].to_string());
        }
    }
    check(out.status.success(), || format!("gradcheck exited with {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim()))?;
    check(stdout.contains("composed_student"), || "composed network not checked".into())?;
    check(worst.0 < 1e-4, || format!("{} has error {:.3e}", worst.1, worst.0))?;
    check(secs < 120.0, || format!("took {secs:.1}s (limit 120s)"))?;
    Ok(format!("{rows} checks over 10 seeds, worst {:.2e} ({}), {secs:.1}s", worst.0, worst.1))
}

// ---------------------------------------------------------------- criterion 2

/// Features with objective `phi = sum(w * F)`, so `d phi / d F = w` exactly.
struct Fixture {
    features: Vec<Tensor>,
    weights: Vec<Tensor>,
}

impl Fixture {
    fn random(rng: &mut Rng, layers: usize) -> Self {
        let mut features = Vec::new();
        let mut weights = Vec::new();
        for _ in 0..layers {
            let (c, h, w) = (rng.below(1, 4), rng.below(1, 5), rng.below(1, 5));
            features.push(Tensor::from_fn(&[c, h, w], |_| rng.range(-1.0, 1.0)));
            weights.push(Tensor::from_fn(&[c, h, w], |_| rng.range(-1.0, 1.0)));
        }
        Self { features, weights }
    }

    fn build(&self, g: &mut Graph) -> (Vec<Var>, Var) {
        let feats: Vec<Var> = self.features.iter().map(|f| g.param(f.clone())).collect();
        let mut phi: Option<Var> = None;
        for (&f, w) in feats.iter().zip(&self.weights) {
            let w = g.constant(w.clone());
            let prod = g.mul(f, w).unwrap();
            let s = g.sum(prod);
            phi = Some(match phi {
                Some(p) => g.add(p, s).unwrap(),
                None => s,
            });
        }
        (feats, phi.unwrap())
    }

    /// Normalized Grad-CAM maps by plain loops.
    fn oracle_maps(&self) -> Vec<Vec<f64>> {
        self.features
            .iter()
            .zip(&self.weights)
            .map(|(f, w)| {
                let (c, h, wd) = f.chw().unwrap();
                let hw = h * wd;
                let mut map = vec![0.0; hw];
                for ch in 0..c {
                    let mut alpha = 0.0;
                    for i in 0..hw {
                        alpha += w.data()[ch * hw + i];
                    }
                    alpha /= hw as f64;
                    for i in 0..hw {
                        map[i] += alpha * f.data()[ch * hw + i];
                    }
                }
                for v in &mut map {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                let mut norm = 0.0;
                for v in &map {
                    norm += v * v;
                }
                let norm = norm.sqrt() + EPS;
                map.iter().map(|v| v / norm).collect()
            })
            .collect()
    }
}

fn oracle_xkd(student: &Fixture, teacher: &Fixture) -> f64 {
    let (s, t) = (student.oracle_maps(), teacher.oracle_maps());
    let mut total = 0.0;
    for (a, b) in s.iter().zip(&t) {
        let mut dot = 0.0;
        for i in 0..a.len() {
            dot += a[i] * b[i];
        }
        total += 1.0 - dot;
    }
    total / s.len() as f64
}

fn xkd_value(student: &Fixture, teacher: &Fixture) -> f64 {
    let mut g = Graph::new();
    let (sf, sp) = student.build(&mut g);
    let (tf, tp) = teacher.build(&mut g);
    let loss = xkd_loss(&mut g, &SaliencyBundle { student_features: sf, student_objective: sp, teacher_features: tf, teacher_objective: tp }).unwrap();
    g.value(loss).item()
}

/// Teacher features with the same spatial sizes as `student`.
fn matching(rng: &mut Rng, student: &Fixture) -> Fixture {
    let mut features = Vec::new();
    let mut weights = Vec::new();
    for f in &student.features {
        let (_, h, w) = f.chw().unwrap();
        let c = rng.below(1, 4);
        features.push(Tensor::from_fn(&[c, h, w], |_| rng.range(-1.0, 1.0)));
        weights.push(Tensor::from_fn(&[c, h, w], |_| rng.range(-1.0, 1.0)));
    }
    Fixture { features, weights }
}

fn xkd_exactness() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let s = Fixture::random(&mut rng, 3);
        let t = matching(&mut rng, &s);
        worst = worst.max((xkd_value(&s, &t) - oracle_xkd(&s, &t)).abs());
    }
    check(worst <= 1e-10, || format!("oracle mismatch {worst:.3e}"))?;

    // Identical maps: the only residue is the EPS guard, 1 - (n / (n + EPS))^2.
    let f = Tensor::new(&[1, 1, 2], vec![0.25, 0.5]).unwrap();
    let same = Fixture { features: vec![f.clone()], weights: vec![Tensor::full(&[1, 1, 2], 1.0)] };
    let identical = xkd_value(&same, &same);
    let n = (0.25f64 * 0.25 + 0.5 * 0.5).sqrt();
    let residue = 1.0 - (n / (n + EPS)).powi(2);
    check(identical >= 0.0 && (identical - residue).abs() <= 1e-15, || format!("identical maps gave {identical:e}, EPS residue {residue:e}"))?;

    let left = Fixture { features: vec![Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 0.0, 0.0]).unwrap()], weights: vec![Tensor::full(&[1, 1, 4], 1.0)] };
    let right = Fixture { features: vec![Tensor::new(&[1, 1, 4], vec![0.0, 0.0, 3.0, 1.0]).unwrap()], weights: vec![Tensor::full(&[1, 1, 4], 1.0)] };
    let disjoint = xkd_value(&left, &right);
    check(disjoint == 1.0, || format!("disjoint maps gave {disjoint}"))?;

    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let layers = rng.below(1, 4);
        let s = Fixture::random(&mut rng, layers);
        let t = matching(&mut rng, &s);
        let v = xkd_value(&s, &t);
        range = (range.0.min(v), range.1.max(v));
    }
    check(range.0 >= 0.0 && range.1 <= 1.0, || format!("loss left [0, 1]: {range:?}"))?;

    let teacher_grad = teacher_gradient_after_backward()?;
    check(teacher_grad == 0.0, || format!("teacher gradient magnitude {teacher_grad:e}"))?;
    Ok(format!(
        "oracle max diff {worst:.1e}; identical {identical:.1e} (EPS residue); disjoint {disjoint}; 1000 bundles in [{:.3}, {:.3}]; teacher grads 0",
        range.0, range.1
    ))
}

/// Both networks on one graph with trainable bindings; returns the largest
/// teacher-parameter gradient entry after backpropagating the alignment loss.
fn teacher_gradient_after_backward() -> Result<f64, String> {
    let scene = xdkd_core::synthetic::generate_scene(3, 32, 32, &SceneParams::default()).map_err(fmt_err)?;
    let sample = Sample::from_scene(&scene).map_err(fmt_err)?;
    let student = DepthNet::new(&ModelSpec::student(), 1).map_err(fmt_err)?;
    let teacher = DepthNet::new(&ModelSpec::student().widened(2), 2).map_err(fmt_err)?;
    let layers = LayerId::DEFAULT_SET;
    let mut g = Graph::new();
    let image = g.constant(sample.image.clone());
    let radar = g.constant(sample.radar.clone());
    let bs = student.params().bind(&mut g, true);
    let bt = teacher.params().bind(&mut g, true);
    let fs = student.forward(&mut g, &bs, image, radar, &layers).map_err(fmt_err)?;
    let ft = teacher.forward(&mut g, &bt, image, radar, &layers).map_err(fmt_err)?;
    let sp = g.mean(fs.depth);
    let tp = g.mean(ft.depth);
    let bundle = SaliencyBundle {
        student_features: layers.iter().map(|&l| fs.layer(l)).collect(),
        student_objective: sp,
        teacher_features: layers.iter().map(|&l| ft.layer(l)).collect(),
        teacher_objective: tp,
    };
    let loss = xkd_loss(&mut g, &bundle).map_err(fmt_err)?;
    g.backward(loss).map_err(fmt_err)?;
    let student_moved = bs.vars().iter().any(|&v| g.grad(v).is_some_and(|t| t.data().iter().any(|&x| x != 0.0)));
    check(student_moved, || "student received no gradient".into())?;
    Ok(bt.vars().iter().filter_map(|&v| g.grad(v)).flat_map(|t| t.data().iter().map(|x| x.abs())).fold(0.0, f64::max))
}

// ---------------------------------------------------------------- criterion 3

fn softmax_probs(d: f64, spec: &BinSpec) -> Vec<f64> {
    let z: Vec<f64> = spec.centers.iter().map(|c| -(d - c).abs() / spec.tau).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn oracle_kl(teacher: f64, student: f64, spec: &BinSpec) -> f64 {
    let q = softmax_probs(teacher, spec);
    let p = softmax_probs(student, spec);
    let mut kl = 0.0;
    for i in 0..q.len() {
        kl += q[i] * (q[i].max(PROB_FLOOR).ln() - p[i].max(PROB_FLOOR).ln());
    }
    spec.tau * spec.tau * kl
}

fn d2kd_value(teacher: &[f64], student: &[f64], spec: &BinSpec) -> f64 {
    let n = teacher.len();
    let mut g = Graph::new();
    let t = g.constant(Tensor::new(&[1, n], teacher.to_vec()).unwrap());
    let s = g.param(Tensor::new(&[1, n], student.to_vec()).unwrap());
    let loss = d2kd_loss(&mut g, t, s, spec, &vec![true; n]).unwrap();
    g.value(loss).item()
}

fn d2kd_exactness() -> Outcome {
    let fixtures = [
        (make_bins(0.0, 40.0, 2, 10.0), 15.0, 25.0),
        (make_bins(0.0, 80.0, 4, 1.0), 25.0, 31.5),
        (make_bins(0.0, 80.0, 4, 7.5), 79.0, 0.5),
        (make_bins(0.5, 80.0, 64, 2.0), 12.3, 47.9),
        (make_bins(0.5, 80.0, 64, 0.25), 3.0, 3.7),
    ];
    let mut worst: f64 = 0.0;
    for (spec, t, s) in &fixtures {
        let spec = spec.as_ref().map_err(fmt_err)?;
        let got = d2kd_value(&[*t], &[*s], spec);
        worst = worst.max((got - oracle_kl(*t, *s, spec)).abs());
    }
    check(worst <= 1e-10, || format!("oracle mismatch {worst:.3e}"))?;

    let spec = BinSpec::default();
    let mut rng = Rng::new(77);
    let mut min_distinct = f64::INFINITY;
    let mut max_equal: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (rng.range(0.5, 80.0), rng.range(0.5, 80.0));
        let v = d2kd_value(&[a], &[b], &spec);
        check(v >= 0.0, || format!("negative KL {v:e} at ({a}, {b})"))?;
        if (a - b).abs() > 1e-3 {
            min_distinct = min_distinct.min(v);
        }
        max_equal = max_equal.max(d2kd_value(&[a], &[a], &spec).abs());
    }
    check(max_equal <= 1e-12, || format!("equal depths gave {max_equal:e}"))?;
    check(min_distinct > 0.0, || "distinct depths gave zero loss".into())?;

    // Centers and depths doubled with tau doubled leave the softmax inputs
    // unchanged, so only the tau^2 prefactor differs: exactly a factor 4.
    let base = make_bins(0.0, 80.0, 8, 1.0).map_err(fmt_err)?;
    let doubled = BinSpec { d_min: 0.0, d_max: 160.0, centers: base.centers.iter().map(|c| 2.0 * c).collect(), tau: 2.0 };
    let (t, s) = ([13.0, 44.0, 70.5], [21.0, 40.0, 3.0]);
    let one = d2kd_value(&t, &s, &base);
    let two = d2kd_value(&t.map(|v| 2.0 * v), &s.map(|v| 2.0 * v), &doubled);
    let ratio = two / one;
    check((ratio - 4.0).abs() <= 1e-10, || format!("tau=2 / tau=1 ratio {ratio}"))?;
    Ok(format!("oracle max diff {worst:.1e}; 1000 pairs >= 0 (min distinct {min_distinct:.2e}, max equal {max_equal:.1e}); tau^2 ratio {ratio:.12}"))
}

// ---------------------------------------------------------------- criterion 4

fn scalar(g: &mut Graph, v: f64) -> Var {
    g.constant(Tensor::scalar(v))
}

fn loss_exactness() -> Outcome {
    let single = |ds: f64, dd: f64, pred: f64| {
        let sup = SupervisionPair::new(Tensor::new(&[1, 1], vec![ds]).unwrap(), Tensor::new(&[1, 1], vec![dd]).unwrap()).unwrap();
        let mut g = Graph::new();
        let p = g.param(Tensor::new(&[1, 1], vec![pred]).unwrap());
        let l = depth_loss(&mut g, p, &sup).unwrap();
        g.value(l).item()
    };
    let two = single(10.0, 12.0, 11.0);
    check((two - 2.0).abs() <= 1e-12, || format!("single-pixel depth loss {two}"))?;
    let zero = single(7.0, 7.0, 7.0);
    check(zero.abs() <= 1e-12, || format!("perfect prediction depth loss {zero}"))?;

    // Random 8x8 case with holes in both masks against plain loops.
    let mut rng = Rng::new(8);
    let field = |rng: &mut Rng, keep: f64| Tensor::from_fn(&[8, 8], |_| if rng.bernoulli(keep) { rng.range(0.5, 80.0) } else { 0.0 });
    let (ds, dd) = (field(&mut rng, 0.3), field(&mut rng, 0.9));
    let pred = Tensor::from_fn(&[8, 8], |_| rng.range(0.5, 80.0));
    let mut reference = 0.0;
    for gt in [&ds, &dd] {
        let (mut sum, mut n) = (0.0, 0.0);
        for i in 0..64 {
            if gt.data()[i] > 0.0 {
                sum += (gt.data()[i] - pred.data()[i]).abs();
                n += 1.0;
            }
        }
        reference += sum / n;
    }
    let sup = SupervisionPair::new(ds, dd).map_err(fmt_err)?;
    let mut g = Graph::new();
    let p = g.param(pred);
    let l = depth_loss(&mut g, p, &sup).map_err(fmt_err)?;
    let random = g.value(l).item();
    check((random - reference).abs() <= 1e-12, || format!("8x8 depth loss {random} vs {reference}"))?;

    let mut g = Graph::new();
    let (d, x, k) = (scalar(&mut g, 2.0), scalar(&mut g, 0.4), scalar(&mut g, 0.6));
    let t = total_loss(&mut g, d, x, k, &LossWeights { depth: 1.0, xkd: 0.5, d2kd: 0.5 }).map_err(fmt_err)?;
    let total = g.value(t).item();
    check((total - 2.5).abs() <= 1e-12, || format!("total loss {total}"))?;
    let t = total_loss(&mut g, d, x, k, &LossWeights { depth: 1.0, xkd: 0.0, d2kd: 0.0 }).map_err(fmt_err)?;
    check(g.value(t).item() == 2.0, || "weights (1, 0, 0) do not reduce to the depth loss".into())?;

    // Training with the distillation weights zeroed follows the plain run bit for bit.
    let scenes: Vec<Scene> = dataset(TRAIN_SEEDS.start, 12, DEFAULT_HEIGHT, DEFAULT_WIDTH, &SceneParams::default()).collect::<Result<_, _>>().map_err(fmt_err)?;
    let data = samples(&scenes).map_err(fmt_err)?;
    let teacher = DepthNet::new(&ModelSpec::student().widened(2), 5).map_err(fmt_err)?;
    let cfg = DistillConfig { epochs: 3, ..Default::default() };
    let zeroed = DistillConfig { weights: LossWeights { depth: 1.0, xkd: 0.0, d2kd: 0.0 }, ..cfg.clone() };
    let mut plain = DepthNet::new(&ModelSpec::student(), 11).map_err(fmt_err)?;
    let mut distilled = plain.clone();
    let a = train(&mut plain, &data, &[], &cfg, None).map_err(fmt_err)?;
    let b = train(&mut distilled, &data, &[], &zeroed, Some(&teacher)).map_err(fmt_err)?;
    let same_params = plain.params().iter().zip(distilled.params().iter()).all(|(p, q)| {
        p.value.data().iter().zip(q.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let same_losses = a.epochs.iter().zip(&b.epochs).all(|(x, y)| x.depth.to_bits() == y.depth.to_bits());
    check(same_params && same_losses, || "lambda2 = lambda3 = 0 trajectory differs from plain training".into())?;
    Ok(format!("single pixel {two}, 8x8 |diff| {:.1e}, total {total}; 3-epoch zero-weight run bit-identical", (random - reference).abs()))
}

// ---------------------------------------------------------------- criterion 5

fn oracle_metrics(pred: &[f64], gt: &[f64], mask: &[bool], cap: f64) -> [f64; 8] {
    let (mut n, mut abs, mut sq, mut rel, mut l10, mut sql) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut within = [0.0; 3];
    for i in 0..pred.len() {
        if !mask[i] || gt[i] <= 0.0 || gt[i] > cap {
            continue;
        }
        // Linear errors use the raw prediction; logs and ratios use the clamp.
        let e = pred[i] - gt[i];
        let p = pred[i].max(MIN_PRED);
        n += 1.0;
        abs += e.abs();
        sq += e * e;
        rel += e.abs() / gt[i];
        l10 += (p.log10() - gt[i].log10()).abs();
        sql += (p.ln() - gt[i].ln()).powi(2);
        let ratio = (p / gt[i]).max(gt[i] / p);
        for k in 0..3 {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                within[k] += 1.0;
            }
        }
    }
    [abs / n, (sq / n).sqrt(), rel / n, l10 / n, (sql / n).sqrt(), within[0] / n, within[1] / n, within[2] / n]
}

fn metrics_oracle() -> Outcome {
    let mut rng = Rng::new(16);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let gt: Vec<f64> = (0..256).map(|_| if rng.bernoulli(0.85) { rng.range(0.5, 90.0) } else { 0.0 }).collect();
        let pred: Vec<f64> = (0..256).map(|_| if rng.bernoulli(0.02) { -1.0 } else { rng.range(0.5, 90.0) }).collect();
        let mask: Vec<bool> = (0..256).map(|_| rng.bernoulli(0.9)).collect();
        for cap in [50.0, 70.0, 80.0] {
            let r: MetricsReport = eval_metrics(&Tensor::new(&[16, 16], pred.clone()).unwrap(), &Tensor::new(&[16, 16], gt.clone()).unwrap(), &mask, cap).map_err(fmt_err)?;
            let ours = r.entries().map(|(_, v)| v);
            for (a, b) in ours.iter().zip(oracle_metrics(&pred, &gt, &mask, cap)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    check(worst <= 1e-10, || format!("max metric diff {worst:.3e}"))?;
    let edge = eval_metrics(&Tensor::new(&[1, 1], vec![10.0]).unwrap(), &Tensor::new(&[1, 1], vec![8.0]).unwrap(), &[true], 80.0).map_err(fmt_err)?;
    check(edge.delta1 == 0.0 && edge.delta2 == 1.0 && edge.abs_rel == 0.25, || format!("boundary case {edge:?}"))?;
    Ok(format!("60 random 16x16 fields, max diff {worst:.1e}; ratio 1.25 gives delta1 = 0, delta2 = 1"))
}

// ------------------------------------------------------- criteria 6, 8 and 9

const STUDENT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Run {
    seed: u64,
    init: DepthNet,
    plain: TrainReport,
    distilled: TrainReport,
    distilled_model: DepthNet,
}

struct Benchmark {
    cfg: RunConfig,
    train: Vec<Sample>,
    eval: Vec<Sample>,
    eval_scenes: Vec<Scene>,
    teacher: DepthNet,
    teacher_report: TrainReport,
    runs: Vec<Run>,
    secs: f64,
}

fn student_config(cfg: &RunConfig, seed: u64) -> (RunConfig, DistillConfig) {
    let cfg = RunConfig::parse(&cfg.to_toml(), &[format!("model.seed={seed}"), format!("train.seed={seed}")]).expect("valid overrides");
    let dc = cfg.distill().expect("valid config");
    (cfg, dc)
}

fn benchmark() -> Result<Benchmark, String> {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let (eval_scenes, train_set, eval) = benchmark_data()?;

    let mut teacher = DepthNet::new(&cfg.teacher_spec().map_err(fmt_err)?, cfg.teacher.seed).map_err(fmt_err)?;
    let teacher_report = train(&mut teacher, &train_set, &eval, &cfg.teacher_training().map_err(fmt_err)?, None).map_err(fmt_err)?;
    progress(&format!("teacher trained: {}", xdkd_core::harness::summary(&teacher_report)));

    let mut runs = Vec::new();
    for seed in STUDENT_SEEDS {
        let (scfg, dc) = student_config(&cfg, seed);
        let spec = scfg.student_spec().map_err(fmt_err)?;
        let init = DepthNet::new(&spec, scfg.model.seed).map_err(fmt_err)?;
        let mut plain_model = init.clone();
        let plain = train(&mut plain_model, &train_set, &eval, &dc, None).map_err(fmt_err)?;
        let mut distilled_model = init.clone();
        let distilled = train(&mut distilled_model, &train_set, &eval, &dc, Some(&teacher)).map_err(fmt_err)?;
        progress(&format!("seed {seed}: plain mae80 {:.4}, distilled mae80 {:.4}", mae80(&plain), mae80(&distilled)));
        runs.push(Run { seed, init, plain, distilled, distilled_model });
    }
    Ok(Benchmark { cfg, train: train_set, eval, eval_scenes, teacher, teacher_report, runs, secs: start.elapsed().as_secs_f64() })
}

fn progress(msg: &str) {
    eprintln!("    .. {msg}");
}

fn mae80(r: &TrainReport) -> f64 {
    r.metrics_at(80.0).map_or(f64::NAN, |m| m.mae)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn distillation_direction(b: &Benchmark) -> Outcome {
    let plain: Vec<f64> = b.runs.iter().map(|r| mae80(&r.plain)).collect();
    let distilled: Vec<f64> = b.runs.iter().map(|r| mae80(&r.distilled)).collect();
    let (mp, md) = (median(plain.clone()), median(distilled.clone()));
    let list = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    let detail = format!(
        "median MAE@80 distilled {md:.4} vs plain {mp:.4} ({:+.2}%); plain [{}], distilled [{}]; teacher {:.4}; {:.0}s",
        100.0 * (md - mp) / mp,
        list(&plain),
        list(&distilled),
        mae80(&b.teacher_report),
        b.secs
    );
    if md <= mp {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn benchmark_data() -> Result<(Vec<Scene>, Vec<Sample>, Vec<Sample>), String> {
    let params = SceneParams::default();
    let (h, w) = (DEFAULT_HEIGHT, DEFAULT_WIDTH);
    let train_scenes: Vec<Scene> = dataset(TRAIN_SEEDS.start, TRAIN_SEEDS.count(), h, w, &params).collect::<Result<_, _>>().map_err(fmt_err)?;
    let eval_scenes: Vec<Scene> = dataset(EVAL_SEEDS.start, EVAL_SEEDS.count(), h, w, &params).collect::<Result<_, _>>().map_err(fmt_err)?;
    Ok((eval_scenes.clone(), samples(&train_scenes).map_err(fmt_err)?, samples(&eval_scenes).map_err(fmt_err)?))
}

fn ablation_orderings(data: &[Sample], eval: &[Sample]) -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let threads = ablation::threads_from_env().map_err(fmt_err)?;
    let rows = ablation::run(&AblationKind::ALL, &cfg.student_spec().map_err(fmt_err)?, cfg.model.seed, data, eval, &cfg.distill().map_err(fmt_err)?, threads).map_err(fmt_err)?;
    let count = |k: AblationKind| rows.iter().find(|r| r.kind == k).map(|r| r.param_count).unwrap();
    let (add, concat, film, bare) = (count(AblationKind::Add), count(AblationKind::Concat), count(AblationKind::Film), count(AblationKind::FilmNoDaspp));
    check(concat > add, || format!("concat {concat} <= add {add}"))?;
    check(film > bare, || format!("film {film} <= film_no_daspp {bare}"))?;
    for r in &rows {
        check(!r.report.metrics.is_empty() && r.report.metrics.iter().all(|m| m.is_finite()), || format!("{} has non-finite metrics", r.kind.as_str()))?;
    }
    let maes: Vec<String> = rows.iter().map(|r| format!("{} {:.3}", r.kind.as_str(), mae80(&r.report))).collect();
    Ok(format!(
        "params concat {concat} > add {add}, film {film} > film_no_daspp {bare}; finite MAE@80: {}; {:.0}s",
        maes.join(", "),
        start.elapsed().as_secs_f64()
    ))
}

fn determinism(b: &Benchmark) -> Outcome {
    let again = benchmark()?;
    let same = |x: &TrainReport, y: &TrainReport| x.without_timing() == y.without_timing();
    check(same(&b.teacher_report, &again.teacher_report), || "teacher report differs".into())?;
    check(b.teacher.params().checksum() == again.teacher.params().checksum(), || "teacher parameters differ".into())?;
    for (x, y) in b.runs.iter().zip(&again.runs) {
        check(same(&x.plain, &y.plain), || format!("seed {} plain report differs", x.seed))?;
        check(same(&x.distilled, &y.distilled), || format!("seed {} distilled report differs", x.seed))?;
    }
    Ok(format!("teacher + {} student reports bit-identical on repeat ({:.0}s)", 2 * b.runs.len(), again.secs))
}

fn saliency_structure(b: &Benchmark) -> Outcome {
    let tmp = tempfile::tempdir().map_err(fmt_err)?;
    let run = &b.runs[0];
    let (student_dir, teacher_dir, data_dir, out_dir) = (tmp.path().join("student"), tmp.path().join("teacher"), tmp.path().join("eval"), tmp.path().join("saliency"));
    checkpoint::save(&run.distilled_model, run.seed, &student_dir).map_err(fmt_err)?;
    checkpoint::save(&b.teacher, b.cfg.teacher.seed, &teacher_dir).map_err(fmt_err)?;
    let files = SceneFiles::from_scene(&b.eval_scenes[0]);
    write_dataset(&data_dir, std::slice::from_ref(&files), false).map_err(fmt_err)?;
    let out = Command::new(env!("CARGO_BIN_EXE_xdkd"))
        .args(["dump-saliency", "--model"])
        .arg(&student_dir)
        .arg("--teacher")
        .arg(&teacher_dir)
        .arg("--scene")
        .arg(data_dir.join(&files.name))
        .arg("--out")
        .arg(&out_dir)
        .output()
        .map_err(fmt_err)?;
    check(out.status.success(), || format!("dump-saliency failed: {}", String::from_utf8_lossy(&out.stderr).trim()))?;
    let layers = LayerId::DEFAULT_SET;
    for source in ["student", "teacher"] {
        for layer in layers {
            let path = out_dir.join(format!("{source}_{}.xtd", layer.to_string().replace('@', "")));
            let map = xtd::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            check(map.data().iter().all(|&v| v >= 0.0), || format!("{source} {layer} map has negative values"))?;
            check(out_dir.join(format!("{source}_{}.pgm", layer.to_string().replace('@', ""))).is_file(), || format!("{source} {layer} PGM missing"))?;
        }
    }

    // Mean cosine per layer over the eval split, averaged over the five seeds.
    let mut before = vec![0.0; layers.len()];
    let mut after = vec![0.0; layers.len()];
    for r in &b.runs {
        let pre = saliency_alignment(&r.init, &b.teacher, &b.eval, &layers).map_err(fmt_err)?;
        let post = saliency_alignment(&r.distilled_model, &b.teacher, &b.eval, &layers).map_err(fmt_err)?;
        for i in 0..layers.len() {
            before[i] += pre[i] / b.runs.len() as f64;
            after[i] += post[i] / b.runs.len() as f64;
        }
    }
    let detail = layers.iter().enumerate().map(|(i, l)| format!("{l} {:.4} -> {:.4}", before[i], after[i])).collect::<Vec<_>>().join(", ");
    check(before.iter().zip(&after).all(|(b, a)| a >= b), || format!("alignment dropped: {detail}"))?;
    Ok(format!("6 non-negative maps written; cosine {detail}"))
}

// ---------------------------------------------------------------------- main

fn run_criterion(id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id} [{name}] {tag} ({secs:.1}s): {detail}");
    outcome.is_ok()
}

fn main() {
    // Ignore libtest-style arguments such as `--nocapture` or filters.
    let mut ok = true;
    ok &= run_criterion(1, "gradient suite", gradient_suite);
    ok &= run_criterion(2, "X-KD exactness", xkd_exactness);
    ok &= run_criterion(3, "D2-KD exactness", d2kd_exactness);
    ok &= run_criterion(4, "depth and total loss exactness", loss_exactness);
    ok &= run_criterion(5, "metrics oracle", metrics_oracle);
    let bench = catch_unwind(benchmark).unwrap_or_else(|_| Err("benchmark panicked".into()));
    match &bench {
        Ok(b) => {
            ok &= run_criterion(6, "distillation direction", || distillation_direction(b));
            ok &= run_criterion(7, "ablation orderings", || ablation_orderings(&b.train, &b.eval));
            ok &= run_criterion(8, "determinism", || determinism(b));
            ok &= run_criterion(9, "saliency structure", || saliency_structure(b));
        }
        Err(e) => {
            for (id, name) in [(6, "distillation direction"), (8, "determinism"), (9, "saliency structure")] {
                ok &= run_criterion(id, name, || Err(format!("benchmark failed: {e}")));
            }
            ok &= run_criterion(7, "ablation orderings", || {
                let (_, data, eval) = benchmark_data()?;
                ablation_orderings(&data, &eval)
            });
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
