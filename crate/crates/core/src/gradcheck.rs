//! Central finite-difference verification of the autodiff engine.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Step used by the checks below.
pub const STEP: f64 = 1e-5;

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`, where
/// `numeric` is the central difference `(f(x + h e) - f(x - h e)) / 2h` and
/// `analytic` comes from [`Graph::backward`]. `f` must return a scalar.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = libm::fabs(analytic.data()[i] - numeric) / libm::fabs(numeric).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
}

/// Random tensor with entries in `[-1, 1]` kept at least `margin` away from 0,
/// so kinks (ReLU, abs) are never within one step of a probe.
pub fn random_tensor(rng: &mut Rng, shape: &[usize], margin: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.range(margin, 1.0);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Fixed random weighting so vector-valued ops reduce to a scalar with a
/// non-trivial gradient.
fn weighted_sum(g: &mut Graph, y: Var, rng: &mut Rng) -> Result<Var> {
    let w = random_tensor(rng, g.shape(y), 0.1);
    let wv = g.constant(w);
    g.dot(y, wv)
}

type Builder = fn(&mut Graph, Var, &mut Rng) -> Result<Var>;

fn primitives() -> Vec<(&'static str, Vec<usize>, Builder)> {
    fn with_const(g: &mut Graph, _x: Var, rng: &mut Rng, shape: &[usize]) -> Var {
        let c = random_tensor(rng, shape, 0.1);
        g.constant(c)
    }
    alloc::vec![
        ("ew_add", alloc::vec![3, 4], |g, x, r| {
            let b = with_const(g, x, r, &[3, 4]);
            let y = g.add(x, b)?;
            weighted_sum(g, y, r)
        }),
        ("ew_add_broadcast", alloc::vec![3, 1, 1], |g, x, r| {
            let a = with_const(g, x, r, &[3, 2, 4]);
            let y = g.add(a, x)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, r)
        }),
        ("ew_mul", alloc::vec![3, 4], |g, x, r| {
            let b = with_const(g, x, r, &[3, 4]);
            let y = g.mul(x, b)?;
            let y = g.mul(y, x)?;
            weighted_sum(g, y, r)
        }),
        ("ew_mul_broadcast", alloc::vec![2, 1, 1], |g, x, r| {
            let a = with_const(g, x, r, &[2, 3, 3]);
            let y = g.mul(a, x)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, r)
        }),
        ("sub", alloc::vec![4], |g, x, r| {
            let b = with_const(g, x, r, &[4]);
            let y = g.sub(b, x)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, r)
        }),
        ("abs", alloc::vec![6], |g, x, r| {
            let y = g.abs(x);
            weighted_sum(g, y, r)
        }),
        ("relu", alloc::vec![2, 5], |g, x, r| {
            let y = g.relu(x);
            weighted_sum(g, y, r)
        }),
        ("sigmoid", alloc::vec![5], |g, x, r| {
            let y = g.sigmoid(x);
            weighted_sum(g, y, r)
        }),
        ("softplus", alloc::vec![5], |g, x, r| {
            let y = g.scale(x, 3.0);
            let y = g.softplus(y);
            weighted_sum(g, y, r)
        }),
        ("ln", alloc::vec![5], |g, x, r| {
            let y = g.mul(x, x)?;
            let y = g.affine(y, 1.0, 0.5);
            let y = g.ln(y, 1e-12);
            weighted_sum(g, y, r)
        }),
        ("softmax", alloc::vec![5], |g, x, r| {
            let y = g.scale(x, 2.0);
            let y = g.softmax(y, 0)?;
            weighted_sum(g, y, r)
        }),
        ("softmax_axis0", alloc::vec![4, 2, 3], |g, x, r| {
            let y = g.softmax(x, 0)?;
            weighted_sum(g, y, r)
        }),
        ("mean", alloc::vec![7], |g, x, r| {
            let y = g.mul(x, x)?;
            let m = g.mean(y);
            weighted_sum(g, m, r)
        }),
        ("sum_axis", alloc::vec![3, 2, 2], |g, x, r| {
            let y = g.sum_axis(x, 0)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, r)
        }),
        ("global_avg_pool", alloc::vec![3, 2, 3], |g, x, r| {
            let y = g.global_avg_pool(x)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, r)
        }),
        ("conv2d_input", alloc::vec![2, 5, 5], |g, x, r| {
            let k = with_const(g, x, r, &[3, 2, 3, 3]);
            let b = with_const(g, x, r, &[3]);
            let y = g.conv2d(x, k, b, 2, 1, 1)?;
            weighted_sum(g, y, r)
        }),
        ("conv2d_kernel", alloc::vec![3, 2, 3, 3], |g, k, r| {
            let x = with_const(g, k, r, &[2, 5, 5]);
            let b = with_const(g, k, r, &[3]);
            let y = g.conv2d(x, k, b, 1, 0, 1)?;
            weighted_sum(g, y, r)
        }),
        ("conv2d_bias", alloc::vec![3], |g, b, r| {
            let x = with_const(g, b, r, &[2, 4, 4]);
            let k = with_const(g, b, r, &[3, 2, 3, 3]);
            let y = g.conv2d(x, k, b, 1, 2, 2)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, r)
        }),
        ("conv2d_dilated_kernel", alloc::vec![2, 2, 3, 3], |g, k, r| {
            let x = with_const(g, k, r, &[2, 6, 5]);
            let b = with_const(g, k, r, &[2]);
            let y = g.conv2d(x, k, b, 1, 2, 2)?;
            weighted_sum(g, y, r)
        }),
        ("bilinear_upsample", alloc::vec![1, 3, 3], |g, x, r| {
            let y = g.upsample_bilinear(x, 2)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, r)
        }),
        ("concat", alloc::vec![2, 2, 2], |g, x, r| {
            let other = with_const(g, x, r, &[1, 2, 2]);
            let y = g.concat(&[other, x])?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, r)
        }),
        ("tile", alloc::vec![2, 3], |g, x, r| {
            let y = g.tile(x, 3)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, r)
        }),
        ("l2_normalize", alloc::vec![4, 4], |g, x, r| {
            let y = g.l2_normalize(x, 1e-8);
            weighted_sum(g, y, r)
        }),
        ("bin_log_likelihood", alloc::vec![2, 3], |g, x, r| {
            // Depths spread over [2, 18] against 8 centres in [1, 19].
            let d = g.affine(x, 8.0, 10.0);
            let centers: Vec<f64> = (0..8).map(|i| 1.0 + 18.0 * i as f64 / 7.0).collect();
            let w = random_tensor(r, &[8, 2, 3], 0.0).map(f64::abs);
            g.bin_log_likelihood(d, &centers, 1.5, 1e-12, w)
        }),
        ("dot", alloc::vec![6], |g, x, r| {
            let y = g.mul(x, x)?;
            weighted_sum(g, y, r)
        }),
    ]
}

/// Runs every registered primitive over `seeds` random inputs and reports the
/// worst error seen per primitive.
pub fn primitive_suite(seeds: &[u64], h: f64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for (name, shape, build) in primitives() {
        let mut worst: f64 = 0.0;
        for &seed in seeds {
            let mut rng = Rng::new(seed);
            let x = random_tensor(&mut rng, &shape, 0.05);
            let consts_seed = rng.next_u64();
            let err = finite_diff_check(
                |g, v| {
                    let mut r = Rng::new(consts_seed);
                    build(g, v, &mut r)
                },
                &x,
                h,
            )?;
            worst = worst.max(err);
        }
        results.push(CheckResult { name: name.into(), max_error: worst });
    }
    Ok(results)
}
