//! Spatial diagnosis of small convolutional networks.
//!
//! A model is probed two ways on an `n x n` grid. Deleting the conv
//! activations of one region at a time shows where the data's
//! discriminative features live; shrinking the test images toward one
//! region at a time shows where the model looks. The two distributions are
//! combined into a fitness value, a robustness index and their difference,
//! the D-Score, which in turn sets the probability of a pad-and-resize
//! augmentation for retraining.

pub mod augment;
pub mod data;
pub mod error;
pub mod nn;
pub mod ops;
pub mod pipeline;
pub mod region;
pub mod report;
pub mod scoring;
pub mod tensor;
pub mod transform;

pub use augment::{make_plan, sample_pads, AugmentPlan, BaselineMethod, GuidedAugment};
pub use data::{gen_synthetic, Dataset, DatasetMeta, GlyphPlacement, Split, SyntheticConfig, SyntheticData};
pub use error::{Error, ErrorClass, Result};
pub use nn::{evaluate, load_weights, save_weights, train, AugmentHook, Model, ModelConfig, TrainConfig};
pub use pipeline::{diagnose, AugmentMethod, RunSettings, TrainedRun};
pub use region::{build_masks, feature_distribution, partition, FeatureDistribution, RegionGrid, RegionMaskSet};
pub use report::{Comparison, ComparisonRow, DiagnosisReport};
pub use scoring::{d_score, fitness, g_bound, robustness, ScoreFlags, ScoreInputs, ScoreResult};
pub use tensor::{ImageShape, Tensor};
pub use transform::{attention_distribution, pad_amounts, transform_image, AttentionDistribution, Padding, TransformSpec};
