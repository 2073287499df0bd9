//! Hard-to-soft label transformation, KL training loss and argmax decoding.
//!
//! Each hard subscore `s ∈ {0..m}` becomes a discrete Gaussian over the
//! expanded grid `{0..m'}` centred at `(s + 0.5)·r − 0.5` (`r = m'/m`), which
//! places the peak in the middle of the `r` expanded bins that decode back to
//! `s` under `⌊argmax / r⌋`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::KL_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MusdlConfig {
    /// Number of subscores (rows).
    pub n_subscores: usize,
    /// Hard classes per subscore.
    pub classes: usize,
    /// Expanded classes per subscore.
    pub expanded: usize,
    /// Gaussian stdev in expanded-index units.
    pub sigma: f64,
}

impl Default for MusdlConfig {
    fn default() -> Self {
        Self {
            n_subscores: 8,
            classes: 4,
            expanded: 32,
            sigma: 5.0,
        }
    }
}

impl MusdlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.expanded < self.classes || !self.expanded.is_multiple_of(self.classes) {
            return Err(Error::InvalidConfig(format!(
                "expanded classes {} must be a positive multiple of classes {}",
                self.expanded, self.classes
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// `m' / m`.
    pub fn ratio(&self) -> usize {
        self.expanded / self.classes
    }

    pub fn center(&self, label: usize) -> f64 {
        (label as f64 + 0.5) * self.ratio() as f64 - 0.5
    }
}

/// `n × m'` row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SoftLabelMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Soft target for a single hard label.
pub fn soft_row(label: usize, cfg: &MusdlConfig) -> Result<Vec<f64>> {
    if label >= cfg.classes {
        return Err(Error::Domain(format!(
            "label {label} outside 0..{}",
            cfg.classes
        )));
    }
    let mu = cfg.center(label);
    let denom = 2.0 * cfg.sigma * cfg.sigma;
    let mut row: Vec<f64> = (0..cfg.expanded)
        .map(|j| (-(j as f64 - mu).powi(2) / denom).exp())
        .collect();
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
    Ok(row)
}

pub fn transform_labels(hard: &[usize], cfg: &MusdlConfig) -> Result<SoftLabelMatrix> {
    cfg.validate()?;
    let mut values = Vec::with_capacity(hard.len() * cfg.expanded);
    for &s in hard {
        values.extend(soft_row(s, cfg)?);
    }
    Ok(SoftLabelMatrix {
        rows: hard.len(),
        cols: cfg.expanded,
        values,
    })
}

/// `Σ_i Σ_j t_ij · ln(t_ij / p_ij)` with `p` clamped below at 1e-12 and
/// zero-target terms skipped.
pub fn kl_loss(target: &SoftLabelMatrix, pred: &[f64]) -> Result<f64> {
    if pred.len() != target.values.len() {
        return Err(Error::Shape(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.values.len()
        )));
    }
    Ok(target
        .values
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, p)| t * (t.ln() - p.max(KL_EPS).ln()))
        .sum())
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `⌊argmax_j p_ij / r⌋` per row of an `n × m'` prediction.
pub fn decode_prediction(pred: &[f64], cfg: &MusdlConfig) -> Result<Vec<usize>> {
    if pred.is_empty() || !pred.len().is_multiple_of(cfg.expanded) {
        return Err(Error::Shape(format!(
            "prediction length {} not a multiple of {}",
            pred.len(),
            cfg.expanded
        )));
    }
    let r = cfg.ratio();
    Ok(pred.chunks(cfg.expanded).map(|row| argmax(row) / r).collect())
}
