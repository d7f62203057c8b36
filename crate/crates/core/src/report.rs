//! Diagnosis reports, comparison tables and heatmap files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::FeatureDistribution;
use crate::scoring::{score, ScoreFlags, ScoreInputs, ScoreResult};
use crate::transform::{AttentionDistribution, RESIZE_METHOD};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Largest allowed gap between stored scores and scores recomputed from the
/// stored distributions.
pub const CONSISTENCY_TOL: f64 = 1e-9;

/// Everything measured by one diagnosis run. Arrays are indexed by region,
/// row-major from region 1 at position 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub engine_version: String,
    /// Seconds since the Unix epoch. Not part of the canonical form.
    pub created_unix: u64,
    pub model_id: String,
    pub dataset_id: String,
    pub n: usize,
    pub t: f64,
    pub classes: usize,
    pub resize: String,
    /// Accuracy of the unmodified model that region deletion is measured against.
    pub baseline_accuracy: f64,
    /// Accuracy of the unmodified model on the untransformed test set.
    pub original_accuracy: f64,
    pub feature_raw: Vec<f64>,
    pub feature: Vec<f64>,
    pub attention_raw: Vec<f64>,
    pub attention: Vec<f64>,
    pub v_fitness: f64,
    pub v_robust: f64,
    pub g_n: f64,
    pub d_score: f64,
    /// Suggested augmentation probability, `min(v_robust / g_n, 1)`.
    pub p: f64,
    pub flags: ScoreFlags,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl DiagnosisReport {
    pub fn assemble(
        model_id: String,
        dataset_id: String,
        classes: usize,
        feature: &FeatureDistribution,
        attention: &AttentionDistribution,
    ) -> Result<Self> {
        if feature.n != attention.n {
            return Err(Error::InvalidArgument(format!(
                "feature grid n = {} differs from attention grid n = {}",
                feature.n, attention.n
            )));
        }
        let flags = ScoreFlags { feature_fallback: feature.fallback };
        let inputs = ScoreInputs {
            n: feature.n,
            classes,
            original_accuracy: attention.original_accuracy,
            raw_attention: attention.raw.clone(),
            feature: feature.normalized.clone(),
            attention: attention.normalized.clone(),
        };
        let s = score(&inputs, flags)?;
        Ok(Self {
            engine_version: ENGINE_VERSION.to_string(),
            created_unix: unix_now(),
            model_id,
            dataset_id,
            n: feature.n,
            t: attention.t,
            classes,
            resize: RESIZE_METHOD.to_string(),
            baseline_accuracy: feature.baseline,
            original_accuracy: attention.original_accuracy,
            feature_raw: feature.raw.clone(),
            feature: feature.normalized.clone(),
            attention_raw: attention.raw.clone(),
            attention: attention.normalized.clone(),
            v_fitness: s.v_fitness,
            v_robust: s.v_robust,
            g_n: s.g_n,
            d_score: s.d_score,
            p: (s.v_robust / s.g_n).min(1.0),
            flags,
        })
    }

    pub fn score_inputs(&self) -> ScoreInputs {
        ScoreInputs {
            n: self.n,
            classes: self.classes,
            original_accuracy: self.original_accuracy,
            raw_attention: self.attention_raw.clone(),
            feature: self.feature.clone(),
            attention: self.attention.clone(),
        }
    }

    /// Scores recomputed from the stored distributions.
    pub fn rescore(&self) -> Result<ScoreResult> {
        score(&self.score_inputs(), self.flags)
    }

    pub fn check_consistency(&self) -> Result<()> {
        let s = self.rescore()?;
        for (name, stored, fresh) in [
            ("v_fitness", self.v_fitness, s.v_fitness),
            ("v_robust", self.v_robust, s.v_robust),
            ("g_n", self.g_n, s.g_n),
            ("d_score", self.d_score, s.d_score),
        ] {
            if (stored - fresh).abs() > CONSISTENCY_TOL {
                return Err(Error::Report(format!("stored {name} = {stored} but arrays give {fresh}")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Report(e.to_string()))
    }

    /// Serialized form with the timestamp zeroed, for determinism checks.
    pub fn canonical(&self) -> Result<String> {
        Self { created_unix: 0, ..self.clone() }.to_toml()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Multi-line text summary with both distributions as grids.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n = {}, t = {}, classes = {}", self.n, self.t, self.classes);
        let _ = writeln!(s, "accuracy   {:.4}", self.original_accuracy);
        let _ = writeln!(s, "v_fitness  {:.4}", self.v_fitness);
        let _ = writeln!(s, "v_robust   {:.4}", self.v_robust);
        let _ = writeln!(s, "D-Score    {:.4}", self.d_score);
        let _ = writeln!(s, "g(n)       {:.4}", self.g_n);
        let _ = writeln!(s, "p          {:.4}", self.p);
        if self.flags.feature_fallback {
            let _ = writeln!(s, "feature distribution fell back to uniform");
        }
        let _ = writeln!(s, "feature distribution:");
        s.push_str(&grid_text(&self.feature, self.n));
        let _ = writeln!(s, "attention accuracies:");
        s.push_str(&grid_text(&self.attention_raw, self.n));
        s
    }
}

fn grid_text(values: &[f64], n: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(n.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:8.4}")).collect();
        let _ = writeln!(s, "  {}", cells.join(" "));
    }
    s
}

/// `n` lines of `n` comma-separated values.
pub fn heatmap_csv(values: &[f64], n: usize) -> Result<String> {
    check_grid(values, n)?;
    let mut s = String::new();
    for row in values.chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    Ok(s)
}

/// Plain ("P2") graymap with values scaled so the minimum maps to 0 and the
/// maximum to 255. A constant grid maps to 0 everywhere.
pub fn heatmap_pgm(values: &[f64], n: usize) -> Result<String> {
    check_grid(values, n)?;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut s = format!("P2\n{n} {n}\n255\n");
    for row in values.chunks(n) {
        let cells: Vec<String> = row
            .iter()
            .map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }.to_string())
            .collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    Ok(s)
}

fn check_grid(values: &[f64], n: usize) -> Result<()> {
    if n == 0 || values.len() != n * n {
        return Err(Error::ShapeMismatch { op: "heatmap", dim: "cells", expected: n * n, actual: values.len() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "heatmap" });
    }
    Ok(())
}

/// Writes `<stem>_feature.{csv,pgm}` and `<stem>_attention.{csv,pgm}` into
/// `dir`, returning the written paths.
pub fn write_heatmaps(report: &DiagnosisReport, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    for (name, values) in [("feature", &report.feature), ("attention", &report.attention)] {
        let csv = dir.join(format!("{stem}_{name}.csv"));
        fs::write(&csv, heatmap_csv(values, report.n)?)?;
        written.push(csv);
        let pgm = dir.join(format!("{stem}_{name}.pgm"));
        fs::write(&pgm, heatmap_pgm(values, report.n)?)?;
        written.push(pgm);
    }
    Ok(written)
}

/// One trained-and-diagnosed configuration in a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    pub accuracy: f64,
    pub attention_raw: Vec<f64>,
    pub feature: Vec<f64>,
    pub v_robust: f64,
    pub v_fitness: f64,
    pub d_score: f64,
}

impl ComparisonRow {
    pub fn from_report(method: &str, seed: u64, p: Option<f64>, loss: Option<f64>, report: &DiagnosisReport) -> Self {
        Self {
            method: method.to_string(),
            seed,
            p,
            loss,
            accuracy: report.original_accuracy,
            attention_raw: report.attention_raw.clone(),
            feature: report.feature.clone(),
            v_robust: report.v_robust,
            v_fitness: report.v_fitness,
            d_score: report.d_score,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub n: usize,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Reads `path` if it exists, appends `rows` and writes it back.
    pub fn append(path: &Path, n: usize, rows: Vec<ComparisonRow>) -> Result<Self> {
        let mut table = if path.exists() { Self::read(path)? } else { Self { n, rows: Vec::new() } };
        if table.n != n {
            return Err(Error::Report(format!("{} holds n = {} rows, not n = {n}", path.display(), table.n)));
        }
        table.rows.extend(rows);
        table.write(path)?;
        Ok(table)
    }

    /// Fixed-width text table, one line per row.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<8} {:>6} {:>6} {:>8} {:>8} {:>9} {:>9} {:>8}\n",
            "method", "seed", "p", "loss", "acc", "v_robust", "v_fitness", "D-Score"
        );
        for r in &self.rows {
            let p = r.p.map_or("-".to_string(), |p| format!("{p:.3}"));
            let loss = r.loss.map_or("-".to_string(), |l| format!("{l:.4}"));
            let _ = writeln!(
                s,
                "{:<8} {:>6} {:>6} {:>8} {:>8.4} {:>9.4} {:>9.4} {:>8.4}",
                r.method, r.seed, p, loss, r.accuracy, r.v_robust, r.v_fitness, r.d_score
            );
        }
        s
    }
}
