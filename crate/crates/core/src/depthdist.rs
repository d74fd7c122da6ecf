//! Depth-distribution distillation.
//!
//! Depths become per-pixel categorical distributions over `B` bins through
//! logits `z_i = -|d - c_i|` and a temperature softmax; the loss is
//! `tau^2 / |valid| * sum_p KL(teacher_p || student_p)`.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Linear depth bins over `[d_min, d_max]` and the softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSpec {
    pub d_min: f64,
    pub d_max: f64,
    pub centers: Vec<f64>,
    pub tau: f64,
}

impl Default for BinSpec {
    fn default() -> Self {
        make_bins(0.5, 80.0, 64, 2.0).expect("valid defaults")
    }
}

impl BinSpec {
    pub fn count(&self) -> usize {
        self.centers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.centers;
        if !(self.d_min < self.d_max) {
            return Err(Error::InvalidBins("d_min must be below d_max"));
        }
        if c.len() < 2 {
            return Err(Error::InvalidBins("need at least two bins"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidBins("temperature must be positive"));
        }
        if c.windows(2).any(|w| w[0] >= w[1]) || c[0] < self.d_min || c[c.len() - 1] > self.d_max {
            return Err(Error::InvalidBins("centers must increase inside [d_min, d_max]"));
        }
        Ok(())
    }
}

/// `B` equal bins; `c_i = d_min + (i - 0.5) (d_max - d_min) / B` for `i = 1..=B`.
pub fn make_bins(d_min: f64, d_max: f64, count: usize, tau: f64) -> Result<BinSpec> {
    let width = (d_max - d_min) / count.max(1) as f64;
    let spec = BinSpec {
        d_min,
        d_max,
        centers: (0..count).map(|i| d_min + (i as f64 + 0.5) * width).collect(),
        tau,
    };
    spec.validate()?;
    Ok(spec)
}

/// `z_i(p) = -|d(p) - c_i|`, shape `B x H x W`.
pub fn depth_logits(depth: &Tensor, spec: &BinSpec) -> Result<Tensor> {
    let (_, h, w) = depth.chw()?;
    let mut data = Vec::with_capacity(spec.count() * h * w);
    for &c in &spec.centers {
        data.extend(depth.data().iter().map(|&d| -libm::fabs(d - c)));
    }
    Tensor::new(&[spec.count(), h, w], data)
}

/// Per-pixel bin probabilities, `B x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution {
    pub probs: Tensor,
    pub spec: BinSpec,
}

/// `softmax(z / tau)` along the bin axis.
pub fn bin_distribution(logits: &Tensor, spec: &BinSpec) -> Result<DepthDistribution> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let scaled = g.scale(z, 1.0 / spec.tau);
    let p = g.softmax(scaled, 0)?;
    Ok(DepthDistribution { probs: g.value(p).clone(), spec: spec.clone() })
}

/// Forward KL from the (detached) teacher depth to the student depth on the graph.
pub fn d2kd_loss(g: &mut Graph, teacher_depth: Var, student_depth: Var, spec: &BinSpec, valid: &[bool]) -> Result<Var> {
    let teacher = g.value(teacher_depth).clone();
    d2kd_loss_with_teacher(g, &teacher, student_depth, spec, valid)
}

/// [`d2kd_loss`] with the teacher depth given as a plain tensor.
pub fn d2kd_loss_with_teacher(g: &mut Graph, teacher: &Tensor, student_depth: Var, spec: &BinSpec, valid: &[bool]) -> Result<Var> {
    let target = teacher_distribution(teacher, spec, valid)?;
    d2kd_loss_with_target(g, &target, student_depth)
}

/// The teacher side of the loss, which does not depend on the student.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherDistribution {
    /// Teacher bin probabilities, zeroed outside the valid pixels.
    pub q: Tensor,
    /// `sum q ln q` over the valid pixels.
    pub neg_entropy: f64,
    pub valid_count: usize,
    pub spec: BinSpec,
}

pub fn teacher_distribution(teacher: &Tensor, spec: &BinSpec, valid: &[bool]) -> Result<TeacherDistribution> {
    spec.validate()?;
    if valid.len() != teacher.len() {
        return Err(Error::ShapeIncompatible(teacher.shape().to_vec(), alloc::vec![valid.len()]));
    }
    let valid_count = valid.iter().filter(|&&v| v).count();
    if valid_count == 0 {
        return Err(Error::NoValidPixels);
    }
    let plane = teacher.len();
    let mut q = bin_distribution(&depth_logits(teacher, spec)?, spec)?.probs;
    let mut neg_entropy = 0.0;
    for (i, qm) in q.data_mut().iter_mut().enumerate() {
        if valid[i % plane] {
            neg_entropy += *qm * libm::log(qm.max(PROB_FLOOR));
        } else {
            *qm = 0.0;
        }
    }
    Ok(TeacherDistribution { q, neg_entropy, valid_count, spec: spec.clone() })
}

/// `KL = sum q ln q - sum q ln p` over valid pixels, scaled by `tau^2 / |valid|`.
pub fn d2kd_loss_with_target(g: &mut Graph, target: &TeacherDistribution, student_depth: Var) -> Result<Var> {
    let spec = &target.spec;
    let (_, h, w) = g.value(student_depth).chw()?;
    if target.q.len() != spec.count() * h * w {
        return Err(Error::ShapeIncompatible(target.q.shape().to_vec(), g.shape(student_depth).to_vec()));
    }
    let cross = g.bin_log_likelihood(student_depth, &spec.centers, spec.tau, PROB_FLOOR, target.q.clone())?;
    let factor = spec.tau * spec.tau / target.valid_count as f64;
    Ok(g.affine(cross, -factor, factor * target.neg_entropy))
}
