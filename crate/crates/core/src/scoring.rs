//! Fitness, robustness, the robustness bound `g(n, c)` and the D-Score.
//!
//! All arithmetic is in `f64`. Distributions are indexed by region,
//! row-major from region 1 at position 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreInputs {
    pub n: usize,
    pub classes: usize,
    /// Accuracy of the unmodified model on the untransformed test set.
    pub original_accuracy: f64,
    /// Accuracies on the transformed test sets, before normalization.
    pub raw_attention: Vec<f64>,
    pub feature: Vec<f64>,
    pub attention: Vec<f64>,
}

impl ScoreInputs {
    pub fn regions(&self) -> usize {
        self.n * self.n
    }

    /// Mean of a distribution over `n²` regions.
    pub fn uniform_mass(&self) -> f64 {
        1.0 / self.regions() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("grid order must be at least 1".into()));
        }
        let k = self.regions();
        for (name, v) in [("raw attention", &self.raw_attention), ("feature", &self.feature), ("attention", &self.attention)] {
            if v.len() != k {
                return Err(Error::ShapeMismatch { op: "score", dim: name, expected: k, actual: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "score" });
            }
        }
        if !self.original_accuracy.is_finite() {
            return Err(Error::NonFinite { op: "score" });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreFlags {
    /// Every region deletion left accuracy at or above baseline, so the
    /// feature distribution fell back to uniform.
    pub feature_fallback: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreResult {
    pub v_fitness: f64,
    pub v_robust: f64,
    pub g_n: f64,
    pub d_score: f64,
    pub flags: ScoreFlags,
}

fn l2_distance(a: &[f64], b: impl Fn(usize) -> f64) -> f64 {
    a.iter().enumerate().map(|(i, x)| (x - b(i)).powi(2)).sum::<f64>().sqrt()
}

pub fn fitness(inputs: &ScoreInputs) -> Result<f64> {
    inputs.validate()?;
    let gap = l2_distance(&inputs.feature, |i| inputs.attention[i]);
    Ok(inputs.original_accuracy - gap * inputs.uniform_mass())
}

/// Lower is better. The third term compares the raw per-region accuracies
/// with the original accuracy, not the normalized attention.
pub fn robustness(inputs: &ScoreInputs) -> Result<f64> {
    inputs.validate()?;
    let u = inputs.uniform_mass();
    let feature = l2_distance(&inputs.feature, |_| u);
    let attention = l2_distance(&inputs.attention, |_| u);
    let accuracy = l2_distance(&inputs.raw_attention, |_| inputs.original_accuracy);
    Ok(u * (feature + attention + accuracy))
}

/// Upper bound on the robustness index when every accuracy is at least chance.
pub fn g_bound(n: usize, classes: usize) -> f64 {
    let n = n as f64;
    let c = classes as f64;
    2.0 * (n * n - 1.0).sqrt() / n.powi(3) + (c - 1.0) / (c * n)
}

pub fn d_score(v_fitness: f64, v_robust: f64) -> f64 {
    v_fitness - v_robust
}

pub fn score(inputs: &ScoreInputs, flags: ScoreFlags) -> Result<ScoreResult> {
    if inputs.classes < 2 {
        return Err(Error::InvalidArgument(format!("class count {} must be at least 2", inputs.classes)));
    }
    let v_fitness = fitness(inputs)?;
    let v_robust = robustness(inputs)?;
    Ok(ScoreResult { v_fitness, v_robust, g_n: g_bound(inputs.n, inputs.classes), d_score: d_score(v_fitness, v_robust), flags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inputs(n: usize, acc: f64, raw: Vec<f64>, feature: Vec<f64>, attention: Vec<f64>) -> ScoreInputs {
        ScoreInputs { n, classes: 10, original_accuracy: acc, raw_attention: raw, feature, attention }
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn fitness_examples() {
        let x = inputs(2, 0.9, vec![0.9; 4], vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]);
        let expected = 0.9 - 0.25 * 2f64.sqrt();
        close(fitness(&x).unwrap(), expected, 1e-15);
        close(fitness(&x).unwrap(), 0.5464, 5e-5);

        let same = inputs(3, 0.8, vec![0.5; 9], vec![1.0 / 9.0; 9], vec![1.0 / 9.0; 9]);
        assert_eq!(fitness(&same).unwrap(), 0.8);

        let zero = inputs(2, 0.0, vec![0.0; 4], vec![0.7, 0.1, 0.1, 0.1], vec![0.25; 4]);
        assert!(fitness(&zero).unwrap() <= 0.0);
    }

    #[test]
    fn robustness_examples() {
        let flat = inputs(3, 0.6, vec![0.6; 9], vec![1.0 / 9.0; 9], vec![1.0 / 9.0; 9]);
        close(robustness(&flat).unwrap(), 0.0, 1e-15);

        let x = inputs(2, 0.9, vec![0.9; 4], vec![1.0, 0.0, 0.0, 0.0], vec![0.25; 4]);
        close(robustness(&x).unwrap(), 0.25 * 0.75f64.sqrt(), 1e-15);
        close(robustness(&x).unwrap(), 0.2165, 5e-5);
    }

    #[test]
    fn third_term_uses_raw_accuracies() {
        // Raw accuracies differ from the original accuracy while the normalized
        // attention is uniform; only the raw reading sees the gap.
        let x = inputs(2, 0.9, vec![0.5; 4], vec![0.25; 4], vec![0.25; 4]);
        close(robustness(&x).unwrap(), 0.25 * (4.0 * 0.16f64).sqrt(), 1e-15);
        let misread = 0.25 * x.attention.iter().map(|a| (a - 0.9).powi(2)).sum::<f64>().sqrt();
        assert!((robustness(&x).unwrap() - misread).abs() > 0.05);
    }

    #[test]
    fn bound_values() {
        close(g_bound(2, 10), 0.8830, 5e-5);
        close(g_bound(3, 10), 0.5095, 5e-5);
        close(g_bound(4, 10), 0.3460, 5e-5);
        for c in [2, 10, 100] {
            close(g_bound(1, c), (c as f64 - 1.0) / c as f64, 1e-15);
        }
    }

    #[test]
    fn extremal_inputs_attain_bound() {
        for n in 1..=5 {
            for c in [2, 10, 37] {
                let k = n * n;
                let mut one_hot = vec![0.0; k];
                one_hot[k / 2] = 1.0;
                let x = ScoreInputs {
                    n,
                    classes: c,
                    original_accuracy: 1.0,
                    raw_attention: vec![1.0 / c as f64; k],
                    feature: one_hot.clone(),
                    attention: one_hot,
                };
                close(robustness(&x).unwrap(), g_bound(n, c), 1e-12);
            }
        }
    }

    #[test]
    fn subtraction_pairs() {
        close(d_score(0.9581, 0.2837), 0.6744, 1e-12);
        close(d_score(0.9296, 0.2179), 0.7117, 1e-12);
        assert_eq!(d_score(0.37, 0.37), 0.0);
    }

    #[test]
    fn length_mismatch_errors() {
        let x = inputs(3, 0.9, vec![0.9; 9], vec![0.25; 4], vec![1.0 / 9.0; 9]);
        assert!(matches!(fitness(&x), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(robustness(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn single_region_grid() {
        let x = inputs(1, 0.9, vec![0.7], vec![1.0], vec![1.0]);
        let r = score(&x, ScoreFlags::default()).unwrap();
        close(r.v_fitness, 0.9, 1e-15);
        close(r.v_robust, 0.2, 1e-12);
        assert_eq!(r.d_score, r.v_fitness - r.v_robust);
    }

    fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n * n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            if s == 0.0 {
                vec![1.0 / v.len() as f64; v.len()]
            } else {
                v.iter().map(|x| x / s).collect()
            }
        })
    }

    fn score_inputs() -> impl Strategy<Value = ScoreInputs> {
        (1usize..5, 2usize..20).prop_flat_map(|(n, c)| {
            let chance = 1.0 / c as f64;
            (distribution(n), distribution(n), prop::collection::vec(chance..=1.0, n * n), chance..=1.0).prop_map(
                move |(feature, attention, raw_attention, original_accuracy)| ScoreInputs {
                    n,
                    classes: c,
                    original_accuracy,
                    raw_attention,
                    feature,
                    attention,
                },
            )
        })
    }

    proptest! {
        #[test]
        fn robustness_respects_bound(x in score_inputs()) {
            prop_assert!(robustness(&x).unwrap() <= g_bound(x.n, x.classes) + 1e-9);
        }

        #[test]
        fn fitness_symmetric(x in score_inputs()) {
            let mut swapped = x.clone();
            std::mem::swap(&mut swapped.feature, &mut swapped.attention);
            prop_assert!((fitness(&x).unwrap() - fitness(&swapped).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn joint_permutation_invariance(x in score_inputs(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut order: Vec<usize> = (0..x.regions()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permute = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let y = ScoreInputs {
                raw_attention: permute(&x.raw_attention),
                feature: permute(&x.feature),
                attention: permute(&x.attention),
                ..x.clone()
            };
            let a = score(&x, ScoreFlags::default()).unwrap();
            let b = score(&y, ScoreFlags::default()).unwrap();
            prop_assert!((a.v_fitness - b.v_fitness).abs() < 1e-12);
            prop_assert!((a.v_robust - b.v_robust).abs() < 1e-12);
            prop_assert!((a.d_score - b.d_score).abs() < 1e-12);
            prop_assert_eq!(a.g_n, b.g_n);
        }

        #[test]
        fn widening_one_gap_never_raises_fitness(x in score_inputs(), step in 0.0f64..0.5) {
            // Move feature mass toward its largest region against uniform
            // attention, rescaling the rest so it still sums to one.
            let k = x.regions();
            prop_assume!(k > 1);
            let base = ScoreInputs { attention: vec![1.0 / k as f64; k], ..x.clone() };
            let i = (0..k).fold(0, |m, j| if base.feature[j] > base.feature[m] { j } else { m });
            let mut moved = base.feature.clone();
            moved[i] += step * (1.0 - moved[i]);
            let rest: f64 = base.feature.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum();
            let scale = if rest > 0.0 { (1.0 - moved[i]) / rest } else { 0.0 };
            for (j, v) in moved.iter_mut().enumerate() {
                if j != i {
                    *v *= scale;
                }
            }
            let widened = ScoreInputs { feature: moved, ..base.clone() };
            prop_assert!(fitness(&widened).unwrap() <= fitness(&base).unwrap() + 1e-12);
        }
    }
}
