//! Region-wise neuron deletion.
//!
//! Each conv output map is tiled into an `n x n` grid of near-equal
//! rectangles indexed `1..=n²` row-major from the upper-left corner. A
//! variant model deletes the same region index in every conv layer by
//! zeroing those conv outputs (all channels) during the forward pass.

use std::ops::Range;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{evaluate, Model};
use crate::tensor::Tensor;

/// Floor-boundary tiling of an `height x width` map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionGrid {
    n: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

/// Boundaries `floor(j * extent / n)` for `j = 0..=n`.
fn boundaries(extent: usize, n: usize) -> Vec<usize> {
    (0..=n).map(|j| j * extent / n).collect()
}

impl RegionGrid {
    pub fn new(height: usize, width: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("grid order must be at least 1".into()));
        }
        if n > height.min(width) {
            return Err(Error::GridTooFine { n, height, width });
        }
        Ok(Self { n, rows: boundaries(height, n), cols: boundaries(width, n) })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn region_count(&self) -> usize {
        self.n * self.n
    }

    pub fn height(&self) -> usize {
        self.rows[self.n]
    }

    pub fn width(&self) -> usize {
        self.cols[self.n]
    }

    pub fn row_boundaries(&self) -> &[usize] {
        &self.rows
    }

    pub fn col_boundaries(&self) -> &[usize] {
        &self.cols
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index == 0 || index > self.region_count() {
            return Err(Error::RegionOutOfRange { index, max: self.region_count() });
        }
        Ok(())
    }

    /// Row and column ranges of region `index` (1-based).
    pub fn bounds(&self, index: usize) -> Result<(Range<usize>, Range<usize>)> {
        self.check_index(index)?;
        let (r, c) = ((index - 1) / self.n, (index - 1) % self.n);
        Ok((self.rows[r]..self.rows[r + 1], self.cols[c]..self.cols[c + 1]))
    }

    /// 1-based index of the region containing `(y, x)`.
    pub fn region_of(&self, y: usize, x: usize) -> Option<usize> {
        if y >= self.height() || x >= self.width() {
            return None;
        }
        let r = self.rows.partition_point(|&b| b <= y) - 1;
        let c = self.cols.partition_point(|&b| b <= x) - 1;
        Some(r * self.n + c + 1)
    }
}

/// Positions of one conv output map that are forced to zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    height: usize,
    width: usize,
    positions: Vec<usize>,
}

impl LayerMask {
    pub fn from_region(grid: &RegionGrid, index: usize) -> Result<Self> {
        let (rows, cols) = grid.bounds(index)?;
        let width = grid.width();
        let positions = rows
            .flat_map(|y| cols.clone().map(move |x| y * width + x))
            .collect();
        Ok(Self { height: grid.height(), width, positions })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Flat `y * width + x` positions, ascending.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.positions.binary_search(&(y * self.width + x)).is_ok()
    }

    /// Zeroes the masked positions in every batch entry and channel of a
    /// `[B,C,H,W]` activation tensor.
    pub fn apply(&self, activations: &mut Tensor) -> Result<()> {
        let s = activations.shape4()?;
        if (s.height, s.width) != (self.height, self.width) {
            return Err(Error::InvalidArgument(format!(
                "mask {}x{} applied to a {}x{} map",
                self.height, self.width, s.height, s.width
            )));
        }
        let plane = s.height * s.width;
        for chunk in activations.data_mut().chunks_exact_mut(plane) {
            for &p in &self.positions {
                chunk[p] = 0.0;
            }
        }
        Ok(())
    }
}

/// One mask per conv layer, all deleting the same region index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMaskSet {
    n: usize,
    region: usize,
    layers: Vec<LayerMask>,
}

impl RegionMaskSet {
    /// A set with no masked positions, equivalent to an unmasked forward.
    pub fn empty(model: &Model) -> Result<Self> {
        let layers = model
            .config()
            .conv_output_shapes()?
            .into_iter()
            .map(|s| LayerMask { height: s.height, width: s.width, positions: Vec::new() })
            .collect();
        Ok(Self { n: 0, region: 0, layers })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn region(&self) -> usize {
        self.region
    }

    pub fn layers(&self) -> &[LayerMask] {
        &self.layers
    }
}

pub fn partition(height: usize, width: usize, n: usize) -> Result<RegionGrid> {
    RegionGrid::new(height, width, n)
}

/// Masks deleting region `index` of an `n x n` grid in every conv layer,
/// each computed from that layer's own output extents.
pub fn build_masks(model: &Model, n: usize, index: usize) -> Result<RegionMaskSet> {
    let shapes = model.config().conv_output_shapes()?;
    if shapes.is_empty() {
        return Err(Error::InvalidArgument("model has no conv layers to mask".into()));
    }
    if n == 0 || index == 0 || index > n * n {
        return Err(Error::RegionOutOfRange { index, max: n * n });
    }
    let layers = shapes
        .iter()
        .map(|s| LayerMask::from_region(&RegionGrid::new(s.height, s.width, n)?, index))
        .collect::<Result<_>>()?;
    Ok(RegionMaskSet { n, region: index, layers })
}

/// Dataset feature distribution measured through `n²` deletion variants.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDistribution {
    pub n: usize,
    /// Accuracy of the unmodified model.
    pub baseline: f64,
    /// Accuracy of variant `i` at position `i - 1`.
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Set when no variant dropped below the baseline and the uniform
    /// distribution was substituted.
    pub fallback: bool,
}

/// `max(f_b − f_i, 0) / Σ_j max(f_b − f_j, 0)`, or uniform with the fallback
/// flag when the denominator is zero.
pub fn normalize_feature_drops(baseline: f64, raw: &[f64]) -> (Vec<f64>, bool) {
    let drops: Vec<f64> = raw.iter().map(|&f| (baseline - f).max(0.0)).collect();
    let total: f64 = drops.iter().sum();
    if total > 0.0 {
        (drops.iter().map(|d| d / total).collect(), false)
    } else {
        let k = raw.len().max(1) as f64;
        (vec![1.0 / k; raw.len()], true)
    }
}

pub fn feature_distribution(model: &Model, test: &Dataset, n: usize) -> Result<FeatureDistribution> {
    if test.is_empty() {
        return Err(Error::Dataset("feature distribution needs a nonempty test set".into()));
    }
    let baseline = evaluate(model, test, None)?;
    let raw = (1..=n * n)
        .map(|i| evaluate(model, test, Some(&build_masks(model, n, i)?)))
        .collect::<Result<Vec<_>>>()?;
    let (normalized, fallback) = normalize_feature_drops(baseline, &raw);
    Ok(FeatureDistribution { n, baseline, raw, normalized, fallback })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use crate::tensor::ImageShape;
    use proptest::prelude::*;

    #[test]
    fn exact_division() {
        let g = partition(6, 6, 3).unwrap();
        for i in 1..=9 {
            let (r, c) = g.bounds(i).unwrap();
            assert_eq!((r.len(), c.len()), (2, 2));
        }
        assert_eq!(g.bounds(5).unwrap(), (2..4, 2..4));
    }

    #[test]
    fn floor_boundaries_for_odd_extent() {
        let g = partition(5, 4, 2).unwrap();
        assert_eq!(g.row_boundaries(), &[0, 2, 5]);
        assert_eq!(g.bounds(1).unwrap().0, 0..2);
        assert_eq!(g.bounds(3).unwrap().0, 2..5);
    }

    #[test]
    fn single_region_covers_map() {
        let g = partition(7, 3, 1).unwrap();
        assert_eq!(g.bounds(1).unwrap(), (0..7, 0..3));
    }

    #[test]
    fn rejects_bad_orders_and_indices() {
        assert!(matches!(partition(3, 8, 4), Err(Error::GridTooFine { .. })));
        assert!(partition(3, 3, 0).is_err());
        let g = partition(6, 6, 2).unwrap();
        assert!(matches!(g.bounds(0), Err(Error::RegionOutOfRange { .. })));
        assert!(matches!(g.bounds(5), Err(Error::RegionOutOfRange { index: 5, max: 4 })));
    }

    #[test]
    fn centre_mask_on_six_by_six() {
        let cfg = ModelConfig::parse("conv(2,3,3) flatten fc(3,softmax)", ImageShape::new(1, 8, 8)).unwrap();
        let m = Model::build(&cfg, 0).unwrap();
        let masks = build_masks(&m, 3, 5).unwrap();
        let mask = &masks.layers()[0];
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(mask.contains(y, x), (2..4).contains(&y) && (2..4).contains(&x));
            }
        }
        assert!(matches!(build_masks(&m, 3, 10), Err(Error::RegionOutOfRange { .. })));
    }

    #[test]
    fn masks_follow_each_layer_extent() {
        let m = Model::build(&ModelConfig::preset("mma").unwrap(), 0).unwrap();
        let masks = build_masks(&m, 2, 4).unwrap();
        assert_eq!(masks.layers().len(), 2);
        assert_eq!((masks.layers()[0].height(), masks.layers()[1].height()), (24, 8));
        assert!(masks.layers()[0].contains(23, 23));
        assert!(masks.layers()[1].contains(4, 4));
        assert!(!masks.layers()[1].contains(3, 4));
    }

    #[test]
    fn drop_normalization_examples() {
        let (f, fb) = normalize_feature_drops(0.9, &[0.7, 0.9, 0.8, 0.9]);
        assert!(!fb);
        let want = [2.0 / 3.0, 0.0, 1.0 / 3.0, 0.0];
        for (a, b) in f.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let (f, fb) = normalize_feature_drops(0.5, &[0.5; 9]);
        assert!(fb);
        assert!(f.iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
        // a variant beating the baseline contributes nothing
        let (f, _) = normalize_feature_drops(0.9908, &[0.9921, 0.98, 0.97, 0.99]);
        assert_eq!(f[0], 0.0);
    }

    proptest! {
        #[test]
        fn tiling_is_exact(h in 1usize..40, w in 1usize..40, n in 1usize..8) {
            prop_assume!(n <= h.min(w));
            let g = partition(h, w, n).unwrap();
            let mut hits = vec![0u8; h * w];
            for i in 1..=n * n {
                let (rows, cols) = g.bounds(i).unwrap();
                prop_assert!((rows.len() as f64 - h as f64 / n as f64).abs() <= 1.0);
                prop_assert!((cols.len() as f64 - w as f64 / n as f64).abs() <= 1.0);
                for y in rows.clone() {
                    for x in cols.clone() {
                        hits[y * w + x] += 1;
                        prop_assert_eq!(g.region_of(y, x), Some(i));
                    }
                }
            }
            prop_assert!(hits.iter().all(|&k| k == 1));
        }

        #[test]
        fn drop_normalization_is_permutation_equivariant(
            raw in prop::collection::vec(0.0f64..1.0, 9),
            baseline in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..9).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<f64> = perm.iter().map(|&k| raw[k]).collect();
            let (a, fa) = normalize_feature_drops(baseline, &raw);
            let (b, fb) = normalize_feature_drops(baseline, &permuted);
            prop_assert_eq!(fa, fb);
            for (j, &k) in perm.iter().enumerate() {
                prop_assert!((b[j] - a[k]).abs() < 1e-12);
            }
            if !fa {
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
