//! Model assembly, training, evaluation and weight files.

mod config;
mod model;
mod train;
mod weights;

pub use config::{parse_layers, ActShape, Activation, LayerSpec, ModelConfig};
pub use model::{Gradients, Model, ParamGrads};
pub use train::{evaluate, evaluate_stats, sample_rng, train, AugmentHook, EpochStats, EvalStats, TrainConfig};
pub use weights::{load_weights, model_id, model_from_bytes, model_to_bytes, save_weights, DSW_MAGIC};
