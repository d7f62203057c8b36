use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::Model;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ops;
use crate::region::RegionMaskSet;
use crate::tensor::ImageShape;

const EVAL_CHUNK: usize = 128;

/// Replaces a training image before it enters a batch.
pub trait AugmentHook: Sync {
    fn augment(&self, image: &[f32], shape: ImageShape, rng: &mut ChaCha8Rng) -> Vec<f32>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 8, lr: 0.05, batch_size: 16, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Random stream for one training image, keyed by `(seed, epoch, index)` so
/// augmentation does not depend on batch order or scheduling.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(((epoch as u64) << 40) | index as u64);
    rng
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    let want = model.input_shape();
    let got = data.image_shape();
    if want != got {
        return Err(Error::InvalidShape(format!(
            "dataset images are {got}, model expects {want}"
        )));
    }
    let bound = data.label_bound();
    if bound > model.classes() {
        return Err(Error::LabelOutOfRange { label: bound - 1, classes: model.classes() });
    }
    Ok(())
}

/// Mini-batch SGD on mean cross-entropy. Batches follow a per-epoch shuffle
/// drawn from `cfg.seed`; the last partial batch is kept.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    hook: Option<&dyn AugmentHook>,
) -> Result<Vec<EpochStats>> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate {} must be finite and non-negative", cfg.lr)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    check_compatible(model, data)?;
    let shape = data.image_shape();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, labels) = data.batch(chunk)?;
            if let Some(hook) = hook {
                let len = shape.len();
                for (slot, &index) in x.data_mut().chunks_exact_mut(len).zip(chunk) {
                    let mut rng = sample_rng(cfg.seed, epoch, index);
                    let out = hook.augment(slot, shape, &mut rng);
                    slot.copy_from_slice(&out);
                }
            }
            let logits = model.forward_train(&x)?;
            let probs = ops::softmax(&logits)?;
            loss_sum += f64::from(ops::cross_entropy(&probs, &labels)?) * chunk.len() as f64;
            correct += count_correct(probs.data(), &labels);
            let grad = ops::softmax_cross_entropy_backward(&probs, &labels)?;
            let grads = model.backward(&grad)?;
            model.sgd_step(&grads, cfg.lr)?;
        }
        stats.push(EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(stats)
}

fn count_correct(probs: &[f32], labels: &[usize]) -> usize {
    let u = probs.len() / labels.len().max(1);
    probs
        .chunks_exact(u.max(1))
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best == l
        })
        .count()
}

/// Fraction of correctly classified samples, optionally with region deletion.
/// Chunks are evaluated in parallel and their counts summed.
pub fn evaluate(model: &Model, data: &Dataset, mask: Option<&RegionMaskSet>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    check_compatible(model, data)?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let correct = indices
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (x, labels) = data.batch(chunk)?;
            let pred = model.predict(&x, mask)?;
            Ok(pred.iter().zip(&labels).filter(|(p, l)| p == l).count())
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / data.len() as f64)
}

/// Mean cross-entropy and accuracy of the unmodified model.
pub fn evaluate_stats(model: &Model, data: &Dataset) -> Result<EvalStats> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    check_compatible(model, data)?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let parts = indices
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (x, labels) = data.batch(chunk)?;
            let probs = model.forward(&x, None)?;
            let loss = f64::from(ops::cross_entropy(&probs, &labels)?) * chunk.len() as f64;
            Ok((loss, count_correct(probs.data(), &labels)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (loss, correct) = parts.into_iter().fold((0.0, 0), |(a, b), (l, c)| (a + l, b + c));
    Ok(EvalStats { loss: loss / data.len() as f64, accuracy: correct as f64 / data.len() as f64 })
}
