//! Mixup coefficient sampling, sample mixing, and the affine / jitter
//! augmenter used for conventional test-time augmentation.

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::types::Shape;

pub const DEFAULT_LAMBDA_MIN: f64 = 0.05;

/// Draws the test-side mixup weight.
///
/// For `alpha > 0`, draws `Beta(alpha, alpha)` and redraws until the value
/// reaches `lambda_min`, which keeps the Beta shape on `[lambda_min, 1]`.
/// `Beta(0, 0)` is degenerate; for `alpha == 0` the result is `lambda_min`
/// or `1` with equal probability.
pub fn sample_lambda(alpha: f64, lambda_min: f64, rng: &mut RngStream) -> Result<f64> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be a non-negative number, got {alpha}"
        )));
    }
    if !(lambda_min > 0.0 && lambda_min <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda_min must lie in (0, 1], got {lambda_min}"
        )));
    }
    if alpha == 0.0 {
        return Ok(if rng.random::<bool>() { 1.0 } else { lambda_min });
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidArgument(format!("Beta({alpha}, {alpha}): {e}")))?;
    loop {
        let lambda: f64 = beta.sample(rng);
        if lambda >= lambda_min && lambda <= 1.0 {
            return Ok(lambda);
        }
    }
}

/// Elementwise `lambda * a + (1 - lambda) * b`.
pub fn mixup_pair(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(u, v)| lambda * u + (1.0 - lambda) * v)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineConfig {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    /// Rotation drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Shift drawn uniformly from `[-t, t]` times the image width / height.
    pub translate_x: f64,
    pub translate_y: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Standard deviation of additive Gaussian noise for vector inputs.
    pub jitter_sigma: f64,
}

impl Default for AffineConfig {
    fn default() -> Self {
        Self {
            horizontal_flip: true,
            vertical_flip: true,
            rotation_deg: 45.0,
            translate_x: 0.1,
            translate_y: 0.1,
            scale_min: 1.0,
            scale_max: 1.2,
            jitter_sigma: 0.25,
        }
    }
}

impl AffineConfig {
    pub fn identity() -> Self {
        Self {
            horizontal_flip: false,
            vertical_flip: false,
            rotation_deg: 0.0,
            translate_x: 0.0,
            translate_y: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            jitter_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg >= 0.0
            && self.translate_x >= 0.0
            && self.translate_y >= 0.0
            && self.scale_min >= 1.0
            && self.scale_max >= self.scale_min
            && self.jitter_sigma >= 0.0
            && [
                self.rotation_deg,
                self.translate_x,
                self.translate_y,
                self.scale_max,
                self.jitter_sigma,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid affine config {self:?}")))
        }
    }
}

fn uniform(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Random flip / rotation / translation / scaling for images (bilinear
/// resampling, zero outside the source), Gaussian jitter for vectors.
pub fn affine_augment(
    x: &[f64],
    shape: Shape,
    cfg: &AffineConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    shape.check(x)?;
    cfg.validate()?;
    match shape {
        Shape::Vector { .. } => {
            if cfg.jitter_sigma == 0.0 {
                return Ok(x.to_vec());
            }
            let noise = Normal::new(0.0, cfg.jitter_sigma)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            Ok(x.iter().map(|v| v + noise.sample(rng)).collect())
        }
        Shape::Image {
            width,
            height,
            channels,
        } => {
            let flip_x = cfg.horizontal_flip && rng.random::<bool>();
            let flip_y = cfg.vertical_flip && rng.random::<bool>();
            let theta = uniform(rng, -cfg.rotation_deg, cfg.rotation_deg).to_radians();
            let tx = uniform(rng, -cfg.translate_x, cfg.translate_x) * width as f64;
            let ty = uniform(rng, -cfg.translate_y, cfg.translate_y) * height as f64;
            let scale = uniform(rng, cfg.scale_min, cfg.scale_max);
            Ok(warp_image(
                x,
                (width, height, channels),
                ImageWarp {
                    flip_x,
                    flip_y,
                    theta,
                    tx,
                    ty,
                    scale,
                },
            ))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ImageWarp {
    flip_x: bool,
    flip_y: bool,
    theta: f64,
    tx: f64,
    ty: f64,
    scale: f64,
}

/// Forward map: flip, then rotate and scale about the centre, then shift.
/// Each output pixel samples the inverse-mapped source location.
fn warp_image(src: &[f64], (w, h, c): (usize, usize, usize), warp: ImageWarp) -> Vec<f64> {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (sin, cos) = warp.theta.sin_cos();
    let at = |x: i64, y: i64, ch: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            src[(y as usize * w + x as usize) * c + ch]
        }
    };
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 - cx - warp.tx;
            let v = y as f64 - cy - warp.ty;
            let mut sx = (cos * u + sin * v) / warp.scale;
            let mut sy = (-sin * u + cos * v) / warp.scale;
            if warp.flip_x {
                sx = -sx;
            }
            if warp.flip_y {
                sy = -sy;
            }
            let sx = sx + cx;
            let sy = sy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            for ch in 0..c {
                let val = (1.0 - fx) * (1.0 - fy) * at(x0, y0, ch)
                    + fx * (1.0 - fy) * at(x0 + 1, y0, ch)
                    + (1.0 - fx) * fy * at(x0, y0 + 1, ch)
                    + fx * fy * at(x0 + 1, y0 + 1, ch);
                out[(y * w + x) * c + ch] = val;
            }
        }
    }
    out
}
