//! Class-imbalance handling: sampler weights and per-batch loss weights.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};
use crate::features::ClipSample;
use crate::phq::{Gender, BINARY_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Class = exact PHQ-8 total score.
    Score,
    /// Class = score ≥ 10.
    Binary,
}

impl FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "score" => Ok(SamplerMode::Score),
            "binary" => Ok(SamplerMode::Binary),
            other => Err(Error::InvalidConfig(format!("unknown sampler mode {other:?}"))),
        }
    }
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerMode::Score => "score",
            SamplerMode::Binary => "binary",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipLabel {
    pub subscores: [u8; 8],
    pub gender: Gender,
}

impl From<&ClipSample> for ClipLabel {
    fn from(c: &ClipSample) -> Self {
        Self {
            subscores: c.subscores,
            gender: c.gender,
        }
    }
}

impl ClipLabel {
    pub fn class(&self, mode: SamplerMode) -> u32 {
        let score: u32 = self.subscores.iter().map(|&s| s as u32).sum();
        match mode {
            SamplerMode::Score => score,
            SamplerMode::Binary => (score >= BINARY_THRESHOLD) as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingWeights {
    pub weights: Vec<f64>,
}

impl SamplingWeights {
    /// Draws `n` clip indices with replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        let dist = WeightedIndex::new(&self.weights)
            .map_err(|e| Error::InvalidConfig(format!("invalid sampler weights: {e}")))?;
        Ok((0..n).map(|_| dist.sample(rng)).collect())
    }
}

/// `1 / count(class)` per clip. With `gender_balance` the class key becomes
/// the (class, gender) pair, so both genders are drawn equally within a class.
pub fn compute_sampler_weights(labels: &[ClipLabel], mode: SamplerMode, gender_balance: bool) -> Result<SamplingWeights> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("no clips to weight".into()));
    }
    let key = |l: &ClipLabel| (l.class(mode), gender_balance.then_some(l.gender));
    let mut counts: BTreeMap<_, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(key(l)).or_default() += 1;
    }
    Ok(SamplingWeights {
        weights: labels.iter().map(|l| 1.0 / counts[&key(l)] as f64).collect(),
    })
}

/// Row weights for the KL loss, laid out `[sample · 8 + head]`: the weight of
/// class `c` on head `k` is `1 / max(1, count of c among the batch's head-k labels)`.
pub fn dynamic_class_weights(batch: &[[u8; 8]], classes: usize) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let mut counts = vec![[0usize; 8]; classes];
    for s in batch {
        for (k, &c) in s.iter().enumerate() {
            let c = c as usize;
            if c >= classes {
                return Err(Error::Domain(format!("subscore {c} outside 0..{classes}")));
            }
            counts[c][k] += 1;
        }
    }
    Ok(batch
        .iter()
        .flat_map(|s| {
            let counts = &counts;
            s.iter()
                .enumerate()
                .map(move |(k, &c)| 1.0 / counts[c as usize][k].max(1) as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(score_item: u8, gender: Gender) -> ClipLabel {
        ClipLabel {
            subscores: [score_item; 8],
            gender,
        }
    }

    #[test]
    fn reciprocal_counts() {
        let mut labels = vec![label(2, Gender::Female); 3];
        labels.extend(vec![label(0, Gender::Male); 7]);
        let w = compute_sampler_weights(&labels, SamplerMode::Binary, false).unwrap();
        assert!((w.weights[0] / w.weights[9] - 7.0 / 3.0).abs() < 1e-12);

        let uniform: Vec<_> = (0..4).map(|i| label(i, Gender::Female)).collect();
        let w = compute_sampler_weights(&uniform, SamplerMode::Score, false).unwrap();
        assert!(w.weights.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gender_key_splits_classes() {
        let labels = vec![
            label(0, Gender::Female),
            label(0, Gender::Male),
            label(0, Gender::Male),
        ];
        let w = compute_sampler_weights(&labels, SamplerMode::Binary, true).unwrap();
        assert_eq!(w.weights, vec![1.0, 0.5, 0.5]);
    }

    #[test]
    fn dynamic_weights_example() {
        let batch = [[0u8; 8], [0u8; 8], [1u8; 8]];
        let w = dynamic_class_weights(&batch, 4).unwrap();
        assert_eq!(&w[..8], &[0.5; 8]);
        assert_eq!(&w[16..], &[1.0; 8]);
        assert!(dynamic_class_weights(&[], 4).is_err());
    }
}
