//! Procedural radar-camera scenes.
//!
//! A pinhole camera 1.5 m above a ground plane looks at 2-6 fronto-parallel
//! boxes. Depth is rendered per pixel; the image is a shaded, depth-correlated
//! intensity with per-box albedo and uniform noise; radar returns are sparse,
//! noisy depth samples concentrated in the lower half of the frame with a
//! fraction of gross outliers. Dense (`dd`) and single-scan (`ds`) ground truth
//! are the rendered depth with random dropout; sky pixels are never valid.
//!
//! Each field draws from its own stream of the scene seed (see [`crate::rng`]):
//! 0 layout, 1 image noise, 2 radar, 3 dense dropout, 4 single-scan dropout.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::supervision::SupervisionPair;
use crate::tensor::Tensor;

/// Training scene seeds of the fixed benchmark.
pub const TRAIN_SEEDS: Range<u64> = 1000..1200;
/// Evaluation scene seeds of the fixed benchmark.
pub const EVAL_SEEDS: Range<u64> = 9000..9050;
pub const DEFAULT_HEIGHT: usize = 64;
pub const DEFAULT_WIDTH: usize = 128;

const STREAM_LAYOUT: u32 = 0;
const STREAM_IMAGE: u32 = 1;
const STREAM_RADAR: u32 = 2;
const STREAM_DENSE: u32 = 3;
const STREAM_SINGLE: u32 = 4;

/// Horizon row as a fraction of the image height.
const HORIZON: f64 = 0.4;
/// Focal length as a multiple of the image height, in pixels.
const FOCAL: f64 = 1.2;
const CAMERA_HEIGHT: f64 = 1.5;
const TINT: [f64; 3] = [1.0, 0.8, 0.6];
const SKY_ALBEDO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub d_min: f64,
    pub d_max: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Radar range noise standard deviation, metres.
    pub radar_sigma: f64,
    pub outlier_rate: f64,
    /// Noise multiplier applied to outlier returns.
    pub outlier_gain: f64,
    /// Range of the fraction of pixels carrying a radar return.
    pub radar_fraction: (f64, f64),
    /// Probability that a radar return lands in the lower image half.
    pub lower_half_bias: f64,
    pub dense_dropout: f64,
    pub single_dropout: f64,
    pub noise_amplitude: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            d_min: 0.5,
            d_max: 80.0,
            min_boxes: 2,
            max_boxes: 6,
            radar_sigma: 0.3,
            outlier_rate: 0.1,
            outlier_gain: 10.0,
            radar_fraction: (0.005, 0.02),
            lower_half_bias: 0.8,
            dense_dropout: 0.05,
            single_dropout: 0.7,
            noise_amplitude: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint {
    pub row: usize,
    pub col: usize,
    pub depth: f64,
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Tensor,
    /// `H x W`, metres; 0 where there is no return.
    pub radar_depth: Tensor,
    pub radar_points: Vec<RadarPoint>,
    /// Rendered depth `H x W` (sky at `d_max`).
    pub truth: Tensor,
    pub sup: SupervisionPair,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.truth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.truth.shape()[1]
    }

    pub fn checksum(&self) -> u64 {
        [&self.image, &self.radar_depth, &self.sup.dd, &self.sup.ds]
            .iter()
            .fold(self.seed, |h, t| h.rotate_left(7) ^ t.checksum())
    }
}

struct SceneBox {
    depth: f64,
    rows: Range<usize>,
    cols: Range<usize>,
    albedo: f64,
}

fn clamp_range(lo: f64, hi: f64, limit: usize) -> Range<usize> {
    let lo = lo.max(0.0).min(limit as f64) as usize;
    let hi = libm::ceil(hi.max(0.0)).min(limit as f64) as usize;
    lo..hi.max(lo)
}

pub fn generate_scene(seed: u64, height: usize, width: usize, params: &SceneParams) -> Result<Scene> {
    if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
        return Err(Error::SceneSize { height, width });
    }
    let (h, w) = (height as f64, width as f64);
    let horizon = HORIZON * h;
    let focal = FOCAL * h;
    let ground_k = CAMERA_HEIGHT * focal;

    let mut truth = vec![params.d_max; height * width];
    let mut albedo = vec![SKY_ALBEDO; height * width];
    let mut sky = vec![true; height * width];
    for y in 0..height {
        let below = y as f64 + 0.5 - horizon;
        if below <= 0.0 {
            continue;
        }
        let depth = (ground_k / below).clamp(params.d_min, params.d_max);
        for x in 0..width {
            truth[y * width + x] = depth;
            albedo[y * width + x] = 0.0;
            sky[y * width + x] = false;
        }
    }

    let mut layout = Rng::stream(seed, STREAM_LAYOUT);
    let n_boxes = layout.below(params.min_boxes, params.max_boxes + 1);
    let mut boxes: Vec<SceneBox> = (0..n_boxes)
        .map(|_| {
            let depth = layout.range(4.0, 60.0);
            let size_h = layout.range(1.0, 4.0);
            let size_w = layout.range(1.5, 6.0);
            let center = layout.range(0.0, w);
            let bottom = horizon + ground_k / depth;
            let top = bottom - focal * size_h / depth;
            let half = 0.5 * focal * size_w / depth;
            SceneBox {
                depth: depth.clamp(params.d_min, params.d_max),
                rows: clamp_range(top, bottom, height),
                cols: clamp_range(center - half, center + half, width),
                albedo: layout.range(0.0, 0.3),
            }
        })
        .collect();
    // Painter's order: far boxes first so near ones overwrite them.
    boxes.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    for b in &boxes {
        for y in b.rows.clone() {
            for x in b.cols.clone() {
                truth[y * width + x] = b.depth;
                albedo[y * width + x] = b.albedo;
                sky[y * width + x] = false;
            }
        }
    }

    let mut noise = Rng::stream(seed, STREAM_IMAGE);
    let plane = height * width;
    let mut image = vec![0.0; 3 * plane];
    for (c, tint) in TINT.iter().enumerate() {
        for i in 0..plane {
            let base = 1.0 - truth[i] / params.d_max + albedo[i] * tint;
            let jitter = noise.range(-params.noise_amplitude, params.noise_amplitude);
            image[c * plane + i] = (base + jitter).clamp(0.0, 1.0);
        }
    }

    let mut radar_rng = Rng::stream(seed, STREAM_RADAR);
    let fraction = radar_rng.range(params.radar_fraction.0, params.radar_fraction.1);
    let wanted = (libm::round(fraction * plane as f64) as usize).max(1);
    let first_ground = (libm::ceil(horizon - 0.5) as usize).min(height - 1);
    let mid = (height / 2).max(first_ground);
    let mut radar = vec![0.0; plane];
    let mut points = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while points.len() < wanted && attempts < 50 * wanted {
        attempts += 1;
        let row = if radar_rng.bernoulli(params.lower_half_bias) || mid == first_ground {
            radar_rng.below(mid, height)
        } else {
            radar_rng.below(first_ground, mid)
        };
        let col = radar_rng.below(0, width);
        let outlier = radar_rng.bernoulli(params.outlier_rate);
        let sigma = if outlier { params.radar_sigma * params.outlier_gain } else { params.radar_sigma };
        let n = radar_rng.normal();
        let i = row * width + col;
        if sky[i] || radar[i] > 0.0 {
            continue;
        }
        let depth = (truth[i] + sigma * n).clamp(params.d_min, params.d_max);
        radar[i] = depth;
        points.push(RadarPoint { row, col, depth, outlier });
    }

    let mut dense_rng = Rng::stream(seed, STREAM_DENSE);
    let mut single_rng = Rng::stream(seed, STREAM_SINGLE);
    let mut dd = vec![0.0; plane];
    let mut ds = vec![0.0; plane];
    for i in 0..plane {
        let keep_dense = !dense_rng.bernoulli(params.dense_dropout);
        let keep_single = !single_rng.bernoulli(params.single_dropout);
        if sky[i] {
            continue;
        }
        if keep_dense {
            dd[i] = truth[i];
        }
        if keep_single {
            ds[i] = truth[i];
        }
    }

    let shape = [height, width];
    Ok(Scene {
        seed,
        image: Tensor::new(&[3, height, width], image)?,
        radar_depth: Tensor::new(&shape, radar)?,
        radar_points: points,
        truth: Tensor::new(&shape, truth)?,
        sup: SupervisionPair::new(Tensor::new(&shape, ds)?, Tensor::new(&shape, dd)?)?,
    })
}

/// Scenes for seeds `seed .. seed + n`, generated lazily.
pub fn dataset(seed: u64, n: usize, height: usize, width: usize, params: &SceneParams) -> impl Iterator<Item = Result<Scene>> + '_ {
    (seed..seed + n as u64).map(move |s| generate_scene(s, height, width, params))
}
