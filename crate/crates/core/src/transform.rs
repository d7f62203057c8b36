//! Directional pad-and-resize test-set transforms and the attention
//! distribution they measure.
//!
//! To push an `h x w` image toward grid cell `(r, c)` of an `n x n` grid,
//! zeros are added on each side in proportion to the number of cells on
//! that side (`top = (r-1)·h/t`, `bottom = (n-r)·h/t`, `left = (c-1)·w/t`,
//! `right = (n-c)·w/t`, rounded to whole pixels) and the padded canvas is
//! resized back to `h x w` bilinearly. Height pairs with the top/bottom
//! pads and width with left/right.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{evaluate, Model};
use crate::tensor::{ImageShape, Tensor};

pub const DEFAULT_T: f64 = 5.0;
pub const RESIZE_METHOD: &str = "bilinear";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformSpec {
    n: usize,
    t: f64,
    row: usize,
    col: usize,
}

impl TransformSpec {
    /// `row` and `col` are 1-based grid coordinates.
    pub fn new(n: usize, t: f64, row: usize, col: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("grid order must be at least 1".into()));
        }
        if !(t.is_finite() && t >= 1.0) {
            return Err(Error::InvalidArgument(format!("t = {t} must be at least 1")));
        }
        if !(1..=n).contains(&row) || !(1..=n).contains(&col) {
            return Err(Error::RegionOutOfRange { index: (row.max(1) - 1) * n + col, max: n * n });
        }
        Ok(Self { n, t, row, col })
    }

    /// Spec for region `index` in `1..=n²`, row-major.
    pub fn for_region(n: usize, t: f64, index: usize) -> Result<Self> {
        if n == 0 || index == 0 || index > n * n {
            return Err(Error::RegionOutOfRange { index, max: n * n });
        }
        Self::new(n, t, (index - 1) / n + 1, (index - 1) % n + 1)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn row(&self) -> usize {
        self.row
    }

    pub fn col(&self) -> usize {
        self.col
    }

    pub fn region(&self) -> usize {
        (self.row - 1) * self.n + self.col
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn is_zero(&self) -> bool {
        *self == Padding::default()
    }
}

pub fn pad_amounts(height: usize, width: usize, spec: &TransformSpec) -> Padding {
    let cells = |k: usize, extent: usize| (k as f64 * extent as f64 / spec.t).round() as usize;
    Padding {
        top: cells(spec.row - 1, height),
        bottom: cells(spec.n - spec.row, height),
        left: cells(spec.col - 1, width),
        right: cells(spec.n - spec.col, width),
    }
}

/// Bilinear resize of a `channels x sh x sw` image with half-pixel centres
/// (source coordinate `(d + 0.5)·scale − 0.5`, clamped to the image).
pub fn resize_bilinear(src: &[f32], channels: usize, sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let axis = |d: usize, s: usize, dn: usize| -> (usize, usize, f32) {
        let scale = s as f64 / dn as f64;
        let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let ys: Vec<_> = (0..dh).map(|y| axis(y, sh, dh)).collect();
    let xs: Vec<_> = (0..dw).map(|x| axis(x, sw, dw)).collect();
    let mut out = Vec::with_capacity(channels * dh * dw);
    for c in 0..channels {
        let plane = &src[c * sh * sw..(c + 1) * sh * sw];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * sw + x0] * (1.0 - fx) + plane[y0 * sw + x1] * fx;
                let bot = plane[y1 * sw + x0] * (1.0 - fx) + plane[y1 * sw + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Zero-pads an image and resizes it back to its original extents.
pub fn pad_and_resize(image: &[f32], shape: ImageShape, pad: Padding) -> Vec<f32> {
    if pad.is_zero() {
        return image.to_vec();
    }
    let ImageShape { channels, height, width } = shape;
    let ph = height + pad.top + pad.bottom;
    let pw = width + pad.left + pad.right;
    let mut canvas = vec![0.0f32; channels * ph * pw];
    for c in 0..channels {
        for y in 0..height {
            let src = &image[(c * height + y) * width..][..width];
            let dst = (c * ph + y + pad.top) * pw + pad.left;
            canvas[dst..dst + width].copy_from_slice(src);
        }
    }
    resize_bilinear(&canvas, channels, ph, pw, height, width)
}

/// Transforms a single `C x H x W` image.
pub fn transform_image(image: &Tensor, spec: &TransformSpec) -> Result<Tensor> {
    let shape = match image.shape()[..] {
        [c, h, w] => ImageShape::new(c, h, w),
        _ => return Err(Error::InvalidShape(format!("expected a CxHxW image, got {:?}", image.shape()))),
    };
    let pad = pad_amounts(shape.height, shape.width, spec);
    Tensor::new(image.shape().to_vec(), pad_and_resize(image.data(), shape, pad))
}

pub fn transform_dataset(data: &Dataset, spec: &TransformSpec) -> Result<Dataset> {
    let shape = data.image_shape();
    let pad = pad_amounts(shape.height, shape.width, spec);
    data.map_images(|_, img| pad_and_resize(img, shape, pad))
}

/// Model attention over grid cells, measured on `n²` transformed test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDistribution {
    pub n: usize,
    pub t: f64,
    /// Accuracy on the set pushed toward region `i`, at position `i - 1`.
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Accuracy on the untransformed test set.
    pub original_accuracy: f64,
}

/// `a_i / Σ_j a_j`.
pub fn normalize_attention(raw: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroAttention);
    }
    Ok(raw.iter().map(|a| a / total).collect())
}

pub fn attention_distribution(model: &Model, test: &Dataset, n: usize, t: f64) -> Result<AttentionDistribution> {
    if test.is_empty() {
        return Err(Error::Dataset("attention distribution needs a nonempty test set".into()));
    }
    let original_accuracy = evaluate(model, test, None)?;
    let raw = (1..=n * n)
        .map(|i| {
            let spec = TransformSpec::for_region(n, t, i)?;
            evaluate(model, &transform_dataset(test, &spec)?, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let normalized = normalize_attention(&raw)?;
    Ok(AttentionDistribution { n, t, raw, normalized, original_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example_region_seven() {
        let spec = TransformSpec::for_region(4, 2.0, 7).unwrap();
        assert_eq!((spec.row(), spec.col()), (2, 3));
        let (h, w) = (28, 40);
        let pad = pad_amounts(h, w, &spec);
        assert_eq!(pad, Padding { top: h / 2, bottom: h, left: w, right: w / 2 });
    }

    #[test]
    fn centre_is_symmetric_and_corner_is_one_sided() {
        let p = pad_amounts(28, 28, &TransformSpec::new(3, 5.0, 2, 2).unwrap());
        assert_eq!((p.top, p.left), (p.bottom, p.right));
        let p = pad_amounts(30, 20, &TransformSpec::new(3, 5.0, 1, 1).unwrap());
        assert_eq!(p, Padding { top: 0, bottom: 12, left: 0, right: 8 });
    }

    #[test]
    fn spec_validation() {
        assert!(TransformSpec::new(3, 0.5, 1, 1).is_err());
        assert!(TransformSpec::new(3, 5.0, 4, 1).is_err());
        assert!(TransformSpec::for_region(3, 5.0, 10).is_err());
    }

    #[test]
    fn single_cell_grid_is_identity() {
        let img = Tensor::new(vec![1, 3, 3], vec![0.1, 0.9, 0.3, 0.0, 1.0, 0.5, 0.2, 0.4, 0.7]).unwrap();
        let out = transform_image(&img, &TransformSpec::new(1, 5.0, 1, 1).unwrap()).unwrap();
        assert_eq!(out, img);
        let zero = Tensor::zeros(&[2, 6, 6]);
        let out = transform_image(&zero, &TransformSpec::new(3, 2.0, 3, 1).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corner_transform_moves_glyph_up_left() {
        let mut data = vec![0.0f32; 28 * 28];
        for y in 9..19 {
            for x in 11..17 {
                data[y * 28 + x] = 1.0;
            }
        }
        let centroid = |d: &[f32]| {
            let (mut m, mut sy, mut sx) = (0.0f64, 0.0f64, 0.0f64);
            for y in 0..28 {
                for x in 0..28 {
                    let v = f64::from(d[y * 28 + x]);
                    m += v;
                    sy += v * y as f64;
                    sx += v * x as f64;
                }
            }
            (sy / m, sx / m)
        };
        let img = Tensor::new(vec![1, 28, 28], data).unwrap();
        let out = transform_image(&img, &TransformSpec::new(3, 5.0, 1, 1).unwrap()).unwrap();
        let (y0, x0) = centroid(img.data());
        let (y1, x1) = centroid(out.data());
        assert!(y1 < y0 && x1 < x0, "({y0},{x0}) -> ({y1},{x1})");
    }

    #[test]
    fn attention_normalization() {
        let a = normalize_attention(&[0.4, 0.4, 0.8, 0.4]).unwrap();
        for (x, y) in a.iter().zip([0.2, 0.2, 0.4, 0.2]) {
            assert!((x - y).abs() < 1e-12);
        }
        let u = normalize_attention(&[0.3; 9]).unwrap();
        assert!(u.iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-15));
        assert!(matches!(normalize_attention(&[0.0; 4]), Err(Error::ZeroAttention)));
    }

    proptest! {
        #[test]
        fn shape_and_mass_bound(
            h in 2usize..20, w in 2usize..20, c in 1usize..3,
            n in 1usize..5, t in 1.0f64..8.0, seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap();
            for i in 1..=n * n {
                let spec = TransformSpec::for_region(n, t, i).unwrap();
                let out = transform_image(&img, &spec).unwrap();
                prop_assert_eq!(out.shape(), img.shape());
                let before: f32 = img.data().iter().sum();
                let after: f32 = out.data().iter().sum();
                prop_assert!(after <= before + 1e-4 * img.len() as f32);
                prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn mirrored_regions_swap_pads(h in 1usize..64, w in 1usize..64, n in 1usize..6, t in 1.0f64..10.0, r in 1usize..6, c in 1usize..6) {
            prop_assume!(r <= n && c <= n);
            let a = pad_amounts(h, w, &TransformSpec::new(n, t, r, c).unwrap());
            let b = pad_amounts(h, w, &TransformSpec::new(n, t, n + 1 - r, n + 1 - c).unwrap());
            prop_assert_eq!((a.top, a.bottom, a.left, a.right), (b.bottom, b.top, b.right, b.left));
        }

        #[test]
        fn attention_is_scale_invariant(raw in prop::collection::vec(0.01f64..1.0, 9), lambda in 0.01f64..100.0) {
            let a = normalize_attention(&raw).unwrap();
            let scaled: Vec<f64> = raw.iter().map(|v| v * lambda).collect();
            let b = normalize_attention(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
