//! End-to-end runs: diagnose a model, retrain with augmentation, compare
//! augmentation methods.

use std::fmt;
use std::str::FromStr;

use crate::augment::{AugmentPlan, BaselineMethod, GuidedAugment};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{evaluate_stats, model_id, train, AugmentHook, EpochStats, EvalStats, Model, ModelConfig, TrainConfig};
use crate::region::feature_distribution;
use crate::report::{Comparison, ComparisonRow, DiagnosisReport};
use crate::transform::attention_distribution;

/// Dataset family whose digits change meaning under flips and rotation.
pub const MNIST_FAMILY: &str = "mnist";

pub fn diagnose(model: &Model, test: &Dataset, n: usize, t: f64) -> Result<DiagnosisReport> {
    let feature = feature_distribution(model, test, n)?;
    let attention = attention_distribution(model, test, n, t)?;
    DiagnosisReport::assemble(model_id(model)?, test.dataset_id(), model.classes(), &feature, &attention)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentMethod {
    None,
    Baseline(BaselineMethod),
    Guided,
}

impl AugmentMethod {
    pub fn allowed_for_family(self, family: &str) -> bool {
        !family.eq_ignore_ascii_case(MNIST_FAMILY)
            || matches!(self, Self::None | Self::Guided | Self::Baseline(BaselineMethod::Rpr))
    }
}

impl fmt::Display for AugmentMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Guided => f.write_str("guided"),
            Self::Baseline(m) => m.fmt(f),
        }
    }
}

impl FromStr for AugmentMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "guided" => Ok(Self::Guided),
            other => other.parse().map(Self::Baseline).map_err(|_| Error::UnknownMethod(s.to_string())),
        }
    }
}

pub fn parse_methods(list: &str) -> Result<Vec<AugmentMethod>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

pub fn check_family(methods: &[AugmentMethod], family: &str) -> Result<()> {
    match methods.iter().find(|m| !m.allowed_for_family(family)) {
        Some(m) => Err(Error::InvalidArgument(format!(
            "method {m} is not allowed for the {family} family (only none, rpr and guided)"
        ))),
        None => Ok(()),
    }
}

/// Training and diagnosis settings shared by every run in a comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSettings {
    pub train: TrainConfig,
    pub n: usize,
    pub t: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: Model,
    pub epochs: Vec<EpochStats>,
    pub test: EvalStats,
    pub report: DiagnosisReport,
}

/// Trains a model, either from `init` or freshly built from `config` with
/// the training seed, then evaluates and diagnoses it on `test`.
pub fn train_and_diagnose(
    config: &ModelConfig,
    init: Option<&Model>,
    train_set: &Dataset,
    test: &Dataset,
    settings: &RunSettings,
    hook: Option<&dyn AugmentHook>,
) -> Result<TrainedRun> {
    let mut model = match init {
        Some(m) => m.clone(),
        None => Model::build(config, settings.train.seed)?,
    };
    let epochs = train(&mut model, train_set, &settings.train, hook)?;
    let test_stats = evaluate_stats(&model, test)?;
    let report = diagnose(&model, test, settings.n, settings.t)?;
    Ok(TrainedRun { model, epochs, test: test_stats, report })
}

/// Retrains once per execution probability. `p = 0` trains without a hook.
pub fn augment_train(
    config: &ModelConfig,
    init: Option<&Model>,
    train_set: &Dataset,
    test: &Dataset,
    settings: &RunSettings,
    probabilities: &[f64],
) -> Result<Vec<(f64, TrainedRun)>> {
    let shape = train_set.image_shape();
    probabilities
        .iter()
        .map(|&p| {
            let plan = AugmentPlan::with_probability(p, shape.height, shape.width)?;
            let hook = GuidedAugment::new(plan);
            let hook: Option<&dyn AugmentHook> = if plan.p > 0.0 { Some(&hook) } else { None };
            Ok((plan.p, train_and_diagnose(config, init, train_set, test, settings, hook)?))
        })
        .collect()
}

/// Trains one model per method and tabulates the diagnoses. The guided
/// probability comes from `guided_p` or, when absent, from the diagnosis of
/// the unaugmented run.
pub fn compare_aug(
    config: &ModelConfig,
    train_set: &Dataset,
    test: &Dataset,
    settings: &RunSettings,
    methods: &[AugmentMethod],
    family: Option<&str>,
    guided_p: Option<f64>,
) -> Result<(Comparison, Vec<TrainedRun>)> {
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no augmentation methods given".into()));
    }
    if let Some(family) = family {
        check_family(methods, family)?;
    }
    let shape = train_set.image_shape();
    let mut unaugmented: Option<TrainedRun> = None;
    let mut rows = Vec::with_capacity(methods.len());
    let mut runs = Vec::with_capacity(methods.len());
    for &method in methods {
        let (run, p) = match method {
            AugmentMethod::None => {
                let run = match &unaugmented {
                    Some(r) => r.clone(),
                    None => train_and_diagnose(config, None, train_set, test, settings, None)?,
                };
                unaugmented = Some(run.clone());
                (run, None)
            }
            AugmentMethod::Baseline(b) => (train_and_diagnose(config, None, train_set, test, settings, Some(&b as &dyn AugmentHook))?, None),
            AugmentMethod::Guided => {
                let p = match guided_p {
                    Some(p) => p,
                    None => {
                        if unaugmented.is_none() {
                            unaugmented = Some(train_and_diagnose(config, None, train_set, test, settings, None)?);
                        }
                        unaugmented.as_ref().map_or(0.0, |r| r.report.p)
                    }
                };
                let plan = AugmentPlan::with_probability(p, shape.height, shape.width)?;
                let hook = GuidedAugment::new(plan);
                (train_and_diagnose(config, None, train_set, test, settings, Some(&hook as &dyn AugmentHook))?, Some(plan.p))
            }
        };
        rows.push(ComparisonRow::from_report(&method.to_string(), settings.train.seed, p, Some(run.test.loss), &run.report));
        runs.push(run);
    }
    Ok((Comparison { n: settings.n, rows }, runs))
}
