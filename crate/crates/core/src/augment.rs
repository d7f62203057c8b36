//! Score-guided pad-and-resize augmentation and the baseline augmentations
//! it is compared against.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::AugmentHook;
use crate::scoring::g_bound;
use crate::tensor::ImageShape;
use crate::transform::{pad_and_resize, Padding};

/// Probability used by the flip baselines and by the random-pad baseline.
pub const BASELINE_PROB: f64 = 0.5;
/// Largest rotation, in degrees, drawn by the rotation baseline.
pub const MAX_ROTATION_DEG: f64 = 180.0;
/// The random-pad baseline draws each side's pad from `0..=extent / 4`.
pub const RPR_MAX_FRACTION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    /// Per-image execution probability.
    pub p: f64,
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl AugmentPlan {
    pub fn with_probability(p: f64, height: usize, width: usize) -> Result<Self> {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::InvalidArgument(format!("execution probability {p} must be finite and non-negative")));
        }
        let p = p.min(1.0);
        let grow = |d: usize| ((1.0 + p) * d as f64).round() as usize;
        Ok(Self { p, height, width, padded_height: grow(height), padded_width: grow(width) })
    }

    /// Total pad along the vertical and horizontal axes.
    pub fn pad_totals(&self) -> (usize, usize) {
        (self.padded_height - self.height, self.padded_width - self.width)
    }
}

/// `p = min(v_robust / g(n, c), 1)`.
pub fn make_plan(v_robust: f64, n: usize, classes: usize, height: usize, width: usize) -> Result<AugmentPlan> {
    if !v_robust.is_finite() || v_robust < 0.0 {
        return Err(Error::InvalidArgument(format!("robustness index {v_robust} must be finite and non-negative")));
    }
    if n == 0 || classes < 2 {
        return Err(Error::InvalidArgument(format!("need n >= 1 and at least 2 classes, got n = {n}, c = {classes}")));
    }
    AugmentPlan::with_probability(v_robust / g_bound(n, classes), height, width)
}

/// Splits `round(p·extent)` pixels into a uniformly random leading pad and
/// the remainder.
pub fn sample_pads(rng: &mut ChaCha8Rng, p: f64, extent: usize) -> (usize, usize) {
    let total = (p * extent as f64).round() as usize;
    let lead = rng.gen_range(0..=total);
    (lead, total - lead)
}

/// Applies the plan with probability `p`, drawing fresh pads each time.
#[derive(Clone, Copy, Debug)]
pub struct GuidedAugment {
    plan: AugmentPlan,
}

impl GuidedAugment {
    pub fn new(plan: AugmentPlan) -> Self {
        Self { plan }
    }

    pub fn plan(&self) -> &AugmentPlan {
        &self.plan
    }
}

impl AugmentHook for GuidedAugment {
    fn augment(&self, image: &[f32], shape: ImageShape, rng: &mut ChaCha8Rng) -> Vec<f32> {
        if !rng.gen_bool(self.plan.p) {
            return image.to_vec();
        }
        let (left, right) = sample_pads(rng, self.plan.p, shape.width);
        let (top, bottom) = sample_pads(rng, self.plan.p, shape.height);
        pad_and_resize(image, shape, Padding { top, bottom, left, right })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaselineMethod {
    /// Random horizontal flip.
    Rhf,
    /// Random vertical flip.
    Rvf,
    /// Random rotation.
    Rr,
    /// Independent random horizontal and vertical flips.
    Rhv,
    /// Random padding then resize.
    Rpr,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 5] = [Self::Rhf, Self::Rvf, Self::Rr, Self::Rhv, Self::Rpr];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rhf => "rhf",
            Self::Rvf => "rvf",
            Self::Rr => "rr",
            Self::Rhv => "rhv",
            Self::Rpr => "rpr",
        }
    }

    /// Applies the method as if every coin flip fired. Rotation uses a
    /// quarter turn and padding uses the largest pad on every side.
    pub fn apply_forced(self, image: &[f32], shape: ImageShape) -> Vec<f32> {
        match self {
            Self::Rhf => flip_horizontal(image, shape),
            Self::Rvf => flip_vertical(image, shape),
            Self::Rhv => flip_vertical(&flip_horizontal(image, shape), shape),
            Self::Rr => rotate(image, shape, 90.0),
            Self::Rpr => {
                let (h, w) = (shape.height / RPR_MAX_FRACTION, shape.width / RPR_MAX_FRACTION);
                pad_and_resize(image, shape, Padding { top: h, bottom: h, left: w, right: w })
            }
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

impl AugmentHook for BaselineMethod {
    fn augment(&self, image: &[f32], shape: ImageShape, rng: &mut ChaCha8Rng) -> Vec<f32> {
        match self {
            Self::Rhf => {
                if rng.gen_bool(BASELINE_PROB) {
                    flip_horizontal(image, shape)
                } else {
                    image.to_vec()
                }
            }
            Self::Rvf => {
                if rng.gen_bool(BASELINE_PROB) {
                    flip_vertical(image, shape)
                } else {
                    image.to_vec()
                }
            }
            Self::Rhv => {
                let mut out = image.to_vec();
                if rng.gen_bool(BASELINE_PROB) {
                    out = flip_horizontal(&out, shape);
                }
                if rng.gen_bool(BASELINE_PROB) {
                    out = flip_vertical(&out, shape);
                }
                out
            }
            Self::Rr => {
                let degrees = rng.gen_range(0.0..MAX_ROTATION_DEG);
                rotate(image, shape, degrees)
            }
            Self::Rpr => {
                if !rng.gen_bool(BASELINE_PROB) {
                    return image.to_vec();
                }
                let mut side = |extent: usize| rng.gen_range(0..=extent / RPR_MAX_FRACTION);
                let pad = Padding {
                    top: side(shape.height),
                    bottom: side(shape.height),
                    left: side(shape.width),
                    right: side(shape.width),
                };
                pad_and_resize(image, shape, pad)
            }
        }
    }
}

pub fn flip_horizontal(image: &[f32], shape: ImageShape) -> Vec<f32> {
    let mut out = image.to_vec();
    for row in out.chunks_exact_mut(shape.width) {
        row.reverse();
    }
    out
}

pub fn flip_vertical(image: &[f32], shape: ImageShape) -> Vec<f32> {
    let plane = shape.height * shape.width;
    let mut out = Vec::with_capacity(image.len());
    for channel in image.chunks_exact(plane) {
        for row in channel.chunks_exact(shape.width).rev() {
            out.extend_from_slice(row);
        }
    }
    out
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Rotates counter-clockwise (as displayed, rows going down) about the image
/// centre by bilinear resampling. Samples falling outside the source read 0.
pub fn rotate(image: &[f32], shape: ImageShape, degrees: f64) -> Vec<f32> {
    let ImageShape { channels, height, width } = shape;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let at = |plane: &[f32], y: i64, x: i64| -> f32 {
        if y < 0 || x < 0 || y >= height as i64 || x >= width as i64 {
            0.0
        } else {
            plane[y as usize * width + x as usize]
        }
    };
    let mut out = vec![0.0f32; image.len()];
    for y in 0..height {
        for x in 0..width {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = snap(cx + dx * cos - dy * sin);
            let sy = snap(cy + dx * sin + dy * cos);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for c in 0..channels {
                let plane = &image[c * height * width..(c + 1) * height * width];
                let top = at(plane, y0, x0) * (1.0 - fx) + at(plane, y0, x0 + 1) * fx;
                let bot = at(plane, y0 + 1, x0) * (1.0 - fx) + at(plane, y0 + 1, x0 + 1) * fx;
                out[(c * height + y) * width + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}
