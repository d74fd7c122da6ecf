//! Supervised depth loss over two ground-truth sources and the weighted
//! training objective.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-scan (`ds`) and accumulated dense (`dd`) ground truth. A pixel is
/// valid exactly where its stored depth is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionPair {
    pub ds: Tensor,
    pub dd: Tensor,
}

impl SupervisionPair {
    pub fn new(ds: Tensor, dd: Tensor) -> Result<Self> {
        if ds.shape() != dd.shape() {
            return Err(Error::ShapeIncompatible(ds.shape().to_vec(), dd.shape().to_vec()));
        }
        Ok(Self { ds, dd })
    }

    pub fn ds_mask(&self) -> Vec<bool> {
        valid_mask(&self.ds)
    }

    pub fn dd_mask(&self) -> Vec<bool> {
        valid_mask(&self.dd)
    }
}

pub fn valid_mask(depth: &Tensor) -> Vec<bool> {
    depth.data().iter().map(|&d| d > 0.0).collect()
}

/// Non-negative weights of the three objective terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub depth: f64,
    pub xkd: f64,
    pub d2kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { depth: 1.0, xkd: 0.5, d2kd: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.depth, self.xkd, self.d2kd].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn combine(&self, depth: f64, xkd: f64, d2kd: f64) -> f64 {
        self.depth * depth + self.xkd * xkd + self.d2kd * d2kd
    }
}

/// `mean |gt - pred|` over the valid pixels of `gt`, or `None` when none are valid.
fn masked_mae(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Option<Var>> {
    let mask: Vec<f64> = gt.data().iter().map(|&d| if d > 0.0 { 1.0 } else { 0.0 }).collect();
    let n = mask.iter().sum::<f64>();
    if n == 0.0 {
        return Ok(None);
    }
    let gt = g.constant(gt.clone());
    let diff = g.sub(pred, gt)?;
    let err = g.abs(diff);
    let m = g.constant(Tensor::new(g.shape(pred), mask)?);
    let masked = g.mul(err, m)?;
    let s = g.sum(masked);
    Ok(Some(g.scale(s, 1.0 / n)))
}

/// Sum of the masked mean absolute errors against both sources. A source with
/// no valid pixel contributes 0; both empty is an error.
pub fn depth_loss(g: &mut Graph, pred: Var, sup: &SupervisionPair) -> Result<Var> {
    if g.shape(pred) != sup.dd.shape() {
        return Err(Error::ShapeIncompatible(g.shape(pred).to_vec(), sup.dd.shape().to_vec()));
    }
    match (masked_mae(g, pred, &sup.ds)?, masked_mae(g, pred, &sup.dd)?) {
        (Some(s), Some(d)) => g.add(s, d),
        (Some(t), None) | (None, Some(t)) => Ok(t),
        (None, None) => Err(Error::NoValidPixels),
    }
}

/// `w.depth * depth + w.xkd * xkd + w.d2kd * d2kd`.
pub fn total_loss(g: &mut Graph, depth: Var, xkd: Var, d2kd: Var, w: &LossWeights) -> Result<Var> {
    let a = g.scale(depth, w.depth);
    let b = g.scale(xkd, w.xkd);
    let c = g.scale(d2kd, w.d2kd);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}
