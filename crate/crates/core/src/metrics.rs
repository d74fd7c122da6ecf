//! Depth evaluation metrics: MAE, RMSE, AbsRel, log10, RMSElog and the
//! threshold accuracies `delta_k` (fraction with `max(p/g, g/p) < 1.25^k`).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Predictions at or below this are clamped before logs and ratios.
pub const MIN_PRED: f64 = 1e-3;
/// Evaluation distance caps in metres.
pub const DEFAULT_CAPS: [f64; 3] = [50.0, 70.0, 80.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub cap: f64,
    pub count: usize,
    /// Masked pixels whose prediction had to be clamped to `MIN_PRED`.
    pub clamped: usize,
    pub mae: f64,
    pub rmse: f64,
    pub abs_rel: f64,
    pub log10: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl MetricsReport {
    /// `(name, value)` pairs in table order.
    pub fn entries(&self) -> [(&'static str, f64); 8] {
        [
            ("mae", self.mae),
            ("rmse", self.rmse),
            ("abs_rel", self.abs_rel),
            ("log10", self.log10),
            ("rmse_log", self.rmse_log),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|(_, v)| v.is_finite())
    }
}

/// Running sums so several maps can be pooled into one report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsAccumulator {
    cap: f64,
    count: usize,
    clamped: usize,
    abs: f64,
    sq: f64,
    rel: f64,
    log10: f64,
    sq_log: f64,
    within: [usize; 3],
}

impl MetricsAccumulator {
    pub fn new(cap: f64) -> Self {
        Self { cap, count: 0, clamped: 0, abs: 0.0, sq: 0.0, rel: 0.0, log10: 0.0, sq_log: 0.0, within: [0; 3] }
    }

    /// Adds pixels where `mask` holds, `gt > 0` and `gt <= cap`.
    pub fn add(&mut self, pred: &Tensor, gt: &Tensor, mask: &[bool]) -> Result<()> {
        if pred.shape() != gt.shape() || mask.len() != gt.len() {
            return Err(Error::ShapeIncompatible(pred.shape().to_vec(), gt.shape().to_vec()));
        }
        for ((&p, &t), &m) in pred.data().iter().zip(gt.data()).zip(mask) {
            if !m || !(t > 0.0) || t > self.cap {
                continue;
            }
            let e = p - t;
            self.count += 1;
            self.abs += libm::fabs(e);
            self.sq += e * e;
            self.rel += libm::fabs(e) / t;
            let pc = if p <= MIN_PRED {
                self.clamped += 1;
                MIN_PRED
            } else {
                p
            };
            self.log10 += libm::fabs(libm::log10(pc) - libm::log10(t));
            let dl = libm::log(pc) - libm::log(t);
            self.sq_log += dl * dl;
            let ratio = (pc / t).max(t / pc);
            let mut threshold = 1.0;
            for w in &mut self.within {
                threshold *= 1.25;
                if ratio < threshold {
                    *w += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.count == 0 {
            return Err(Error::NoValidPixels);
        }
        let n = self.count as f64;
        Ok(MetricsReport {
            cap: self.cap,
            count: self.count,
            clamped: self.clamped,
            mae: self.abs / n,
            rmse: libm::sqrt(self.sq / n),
            abs_rel: self.rel / n,
            log10: self.log10 / n,
            rmse_log: libm::sqrt(self.sq_log / n),
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
        })
    }
}

/// Metrics of one prediction against ground truth within `cap` metres.
pub fn eval_metrics(pred: &Tensor, gt: &Tensor, mask: &[bool], cap: f64) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(cap);
    acc.add(pred, gt, mask)?;
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let gt = Tensor::from_fn(&[3, 3], |i| 1.0 + i as f64 * 5.0);
        let r = eval_metrics(&gt, &gt, &[true; 9], 80.0).unwrap();
        assert_eq!((r.mae, r.rmse, r.abs_rel, r.log10, r.rmse_log), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn delta_boundary_is_strict() {
        let pred = Tensor::new(&[1, 1], alloc::vec![10.0]).unwrap();
        let gt = Tensor::new(&[1, 1], alloc::vec![8.0]).unwrap();
        let r = eval_metrics(&pred, &gt, &[true], 80.0).unwrap();
        assert_eq!(r.abs_rel, 0.25);
        assert_eq!(r.delta1, 0.0);
        assert_eq!(r.delta2, 1.0);
    }

    #[test]
    fn cap_and_clamp() {
        let pred = Tensor::new(&[1, 3], alloc::vec![-1.0, 60.0, 10.0]).unwrap();
        let gt = Tensor::new(&[1, 3], alloc::vec![5.0, 60.0, 0.0]).unwrap();
        let r = eval_metrics(&pred, &gt, &[true; 3], 50.0).unwrap();
        assert_eq!((r.count, r.clamped), (1, 1));
        assert!(r.is_finite());
        let r80 = eval_metrics(&pred, &gt, &[true; 3], 80.0).unwrap();
        assert_eq!(r80.count, 2);
        assert!(eval_metrics(&pred, &gt, &[false; 3], 80.0).is_err());
    }
}
