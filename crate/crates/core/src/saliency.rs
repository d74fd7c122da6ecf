//! Grad-CAM saliency maps and the saliency-alignment distillation loss.
//!
//! For a feature map `F` (`C x H x W`) and a scalar objective `phi` (the mean
//! predicted depth), channel weights are the spatial means of `d phi / d F`
//! and the map is `ReLU(sum_c alpha_c F_c)`. Maps are flattened and divided by
//! `||map|| + EPS`; the loss per layer is `1 - <student, teacher>` and the
//! distillation loss averages over layers.
//!
//! Teacher maps are plain tensors (no gradient path). The student's weights
//! `alpha` are read from a first-order gradient pass and then held constant,
//! so the loss gradient reaches the student only through its features.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::LayerId;
use crate::tensor::Tensor;

/// Guard added to the map norm before division.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Student,
    Teacher,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Student => "student",
            Source::Teacher => "teacher",
        }
    }
}

/// Non-negative `H x W` saliency map of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Tensor,
    pub layer: LayerId,
    pub source: Source,
}

/// `alpha_c` = spatial mean of the objective gradient over channel `c`.
pub fn gradcam_weights(feature: &Tensor, grad: &Tensor) -> Result<Tensor> {
    if feature.shape() != grad.shape() || feature.rank() != 3 {
        return Err(Error::ShapeIncompatible(feature.shape().to_vec(), grad.shape().to_vec()));
    }
    let (c, h, w) = grad.chw()?;
    let data = (0..c).map(|ch| grad.channel(ch).iter().sum::<f64>() / (h * w) as f64).collect();
    Tensor::new(&[c], data)
}

/// `ReLU(sum_c alpha_c F_c)`, shape `H x W`.
pub fn saliency_map(feature: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let (c, h, w) = feature.chw()?;
    if alpha.len() != c {
        return Err(Error::ShapeIncompatible(feature.shape().to_vec(), alpha.shape().to_vec()));
    }
    let mut acc = alloc::vec![0.0; h * w];
    for (ch, &a) in alpha.data().iter().enumerate() {
        for (dst, &f) in acc.iter_mut().zip(feature.channel(ch)) {
            *dst += a * f;
        }
    }
    Tensor::new(&[h, w], acc.into_iter().map(|v| v.max(0.0)).collect())
}

/// Row-major flatten divided by `||map||_2 + EPS`; the zero map stays zero.
pub fn normalize_map(map: &Tensor) -> Tensor {
    let norm = libm::sqrt(map.data().iter().map(|v| v * v).sum::<f64>());
    let data = map.data().iter().map(|v| v / (norm + EPS)).collect();
    Tensor::new(&[map.len()], data).expect("length matches")
}

/// Inner product of two normalized maps (cosine similarity for nonzero maps).
pub fn alignment(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Normalized Grad-CAM maps of `features` with respect to `objective`, as
/// constants. `features` must be reachable gradient nodes (see [`Graph::watch`]).
pub fn unit_maps(g: &Graph, features: &[Var], objective: Var) -> Result<Vec<Tensor>> {
    let grads = g.gradients(objective, features)?;
    features
        .iter()
        .zip(&grads)
        .map(|(&f, grad)| {
            let alpha = gradcam_weights(g.value(f), grad)?;
            Ok(normalize_map(&saliency_map(g.value(f), &alpha)?))
        })
        .collect()
}

/// Student and teacher handles for one alignment loss.
#[derive(Debug, Clone)]
pub struct SaliencyBundle {
    pub student_features: Vec<Var>,
    pub student_objective: Var,
    pub teacher_features: Vec<Var>,
    pub teacher_objective: Var,
}

/// Mean over layers of `1 - <student map, teacher map>`, built on the graph.
pub fn xkd_loss(g: &mut Graph, bundle: &SaliencyBundle) -> Result<Var> {
    if bundle.teacher_features.len() != bundle.student_features.len() {
        return Err(Error::InvalidArgument("teacher and student layer counts differ".into()));
    }
    if bundle.student_features.is_empty() {
        return Err(Error::NoDistillLayers);
    }
    let targets = unit_maps(g, &bundle.teacher_features, bundle.teacher_objective)?;
    xkd_loss_with_targets(g, &bundle.student_features, bundle.student_objective, &targets)
}

/// Same as [`xkd_loss`] with the teacher side already reduced to unit maps.
pub fn xkd_loss_with_targets(g: &mut Graph, features: &[Var], objective: Var, targets: &[Tensor]) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::NoDistillLayers);
    }
    let alphas = student_weights(g, features, objective)?;
    xkd_loss_fixed_weights(g, features, &alphas, targets)
}

/// Grad-CAM weights of each feature map for `objective`, as plain tensors.
pub fn student_weights(g: &Graph, features: &[Var], objective: Var) -> Result<Vec<Tensor>> {
    let grads = g.gradients(objective, features)?;
    features.iter().zip(&grads).map(|(&f, grad)| gradcam_weights(g.value(f), grad)).collect()
}

/// The alignment loss with the channel weights supplied as constants.
pub fn xkd_loss_fixed_weights(g: &mut Graph, features: &[Var], alphas: &[Tensor], targets: &[Tensor]) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::NoDistillLayers);
    }
    if features.len() != targets.len() || features.len() != alphas.len() {
        return Err(Error::InvalidArgument("one teacher map per student layer required".into()));
    }
    let mut total: Option<Var> = None;
    for ((&f, alpha), target) in features.iter().zip(alphas).zip(targets) {
        let (c, h, w) = g.value(f).chw()?;
        if target.len() != h * w {
            return Err(Error::ShapeIncompatible(alloc::vec![h, w], target.shape().to_vec()));
        }
        let alpha = g.constant(alpha.clone().reshape(&[c, 1, 1])?);
        let weighted = g.mul(f, alpha)?;
        let summed = g.sum_axis(weighted, 0)?;
        let map = g.relu(summed);
        let flat = g.reshape(map, &[h * w])?;
        let unit = g.l2_normalize(flat, EPS);
        let t = g.constant(target.clone());
        let cos = g.dot(unit, t)?;
        let layer_loss = g.affine(cos, -1.0, 1.0);
        total = Some(match total {
            Some(acc) => g.add(acc, layer_loss)?,
            None => layer_loss,
        });
    }
    let total = total.expect("non-empty");
    Ok(g.scale(total, 1.0 / features.len() as f64))
}
