//! PHQ-8 scoring rules, participant-level recombination of clip predictions,
//! and evaluation metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_SUBSCORES: usize = 8;
pub const MAX_SUBSCORE: u8 = 3;
pub const BINARY_THRESHOLD: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    NotSignificant,
    Mild,
    Moderate,
    ModeratelySevere,
    Severe,
}

impl Severity {
    pub fn from_score(score: u32) -> Result<Self> {
        Ok(match score {
            0..=4 => Severity::NotSignificant,
            5..=9 => Severity::Mild,
            10..=14 => Severity::Moderate,
            15..=19 => Severity::ModeratelySevere,
            20..=24 => Severity::Severe,
            _ => return Err(Error::Domain(format!("PHQ-8 score {score} outside 0..=24"))),
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Severity::NotSignificant => "not significant",
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::ModeratelySevere => "moderately severe",
            Severity::Severe => "severe",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f" | "female" | "0" => Ok(Gender::Female),
            "m" | "male" | "1" => Ok(Gender::Male),
            other => Err(Error::Format(format!("unknown gender tag {other:?}"))),
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::Female => "female",
            Gender::Male => "male",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhqRecord {
    pub subscores: [u8; N_SUBSCORES],
    pub score: u32,
    pub binary: bool,
    pub severity: Severity,
}

pub fn derive_phq(subscores: &[u8]) -> Result<PhqRecord> {
    let subscores: [u8; N_SUBSCORES] = subscores.try_into().map_err(|_| {
        Error::Domain(format!("expected {N_SUBSCORES} subscores, got {}", subscores.len()))
    })?;
    if let Some(bad) = subscores.iter().find(|&&s| s > MAX_SUBSCORE) {
        return Err(Error::Domain(format!("subscore {bad} outside 0..=3")));
    }
    let score: u32 = subscores.iter().map(|&s| s as u32).sum();
    Ok(PhqRecord {
        subscores,
        score,
        binary: score >= BINARY_THRESHOLD,
        severity: Severity::from_score(score)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantResult {
    pub participant_id: String,
    pub gender: Gender,
    pub clips: Vec<PhqRecord>,
    /// Mean of clip scores, not rounded.
    pub score: f64,
    /// Set when strictly more than half of the clips are positive.
    pub binary: bool,
}

pub fn aggregate_participant(
    participant_id: &str,
    gender: Gender,
    clips: Vec<PhqRecord>,
) -> Result<ParticipantResult> {
    if clips.is_empty() {
        return Err(Error::EmptyInput(format!(
            "participant {participant_id} has no clips"
        )));
    }
    let n = clips.len() as f64;
    let score = clips.iter().map(|c| c.score as f64).sum::<f64>() / n;
    let positive = clips.iter().filter(|c| c.binary).count() as f64;
    Ok(ParticipantResult {
        participant_id: participant_id.to_string(),
        gender,
        clips,
        score,
        binary: positive / n > 0.5,
    })
}

/// Score and binary verdict of one clip or participant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub score: f64,
    pub binary: bool,
}

impl From<&PhqRecord> for Outcome {
    fn from(r: &PhqRecord) -> Self {
        Outcome {
            score: r.score as f64,
            binary: r.binary,
        }
    }
}

impl From<&ParticipantResult> for Outcome {
    fn from(r: &ParticipantResult) -> Self {
        Outcome {
            score: r.score,
            binary: r.binary,
        }
    }
}

/// Binary metrics use depressed (binary = 1) as the positive class. A ratio
/// with a zero denominator is reported as 0 and flagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mae: f64,
    pub rmse: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

pub fn compute_metrics(preds: &[Outcome], truths: &[Outcome]) -> Result<Metrics> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} ground-truth entries",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("no predictions to score".into()));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0.0, 0.0, 0.0, 0.0);
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, t) in preds.iter().zip(truths) {
        match (p.binary, t.binary) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => {}
        }
        if p.binary == t.binary {
            correct += 1.0;
        }
        let e = p.score - t.score;
        abs += e.abs();
        sq += e * e;
    }
    let n = preds.len() as f64;
    let (precision, precision_undefined) = ratio(tp, tp + fp);
    let (recall, recall_undefined) = ratio(tp, tp + fn_);
    let (f1, f1_undefined) = ratio(2.0 * precision * recall, precision + recall);
    Ok(Metrics {
        n: preds.len(),
        accuracy: correct / n,
        precision,
        recall,
        f1,
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        precision_undefined,
        recall_undefined,
        f1_undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderSplitReport {
    pub overall: Metrics,
    /// `None` marks an absent group.
    pub female: Option<Metrics>,
    pub male: Option<Metrics>,
    /// |female − male| accuracy in percentage points.
    pub accuracy_gap_pct: Option<f64>,
    /// |female − male| F1.
    pub f1_gap: Option<f64>,
}

pub fn gender_split_report(
    entries: &[(Gender, Outcome, Outcome)],
) -> Result<GenderSplitReport> {
    let group = |g: Option<Gender>| -> Result<Option<Metrics>> {
        let (p, t): (Vec<_>, Vec<_>) = entries
            .iter()
            .filter(|e| g.is_none_or(|g| e.0 == g))
            .map(|e| (e.1, e.2))
            .unzip();
        if p.is_empty() {
            Ok(None)
        } else {
            compute_metrics(&p, &t).map(Some)
        }
    };
    let overall = group(None)?.ok_or_else(|| Error::EmptyInput("no results to report".into()))?;
    let female = group(Some(Gender::Female))?;
    let male = group(Some(Gender::Male))?;
    let (accuracy_gap_pct, f1_gap) = match (&female, &male) {
        (Some(f), Some(m)) => (
            Some((f.accuracy - m.accuracy).abs() * 100.0),
            Some((f.f1 - m.f1).abs()),
        ),
        _ => (None, None),
    };
    Ok(GenderSplitReport {
        overall,
        female,
        male,
        accuracy_gap_pct,
        f1_gap,
    })
}

impl GenderSplitReport {
    /// Two-row text table: accuracy (%) and F1 for overall / female / male / gap.
    pub fn render(&self) -> String {
        let cell = |m: &Option<Metrics>, f: fn(&Metrics) -> String| {
            m.as_ref().map(f).unwrap_or_else(|| "absent".into())
        };
        let gap = |g: Option<f64>, digits: usize| {
            g.map(|v| format!("{v:.digits$}")).unwrap_or_else(|| "n/a".into())
        };
        let mut s = String::new();
        s.push_str("metric\toverall\tfemale\tmale\t|female-male|\n");
        s.push_str(&format!(
            "accuracy_pct\t{:.2}\t{}\t{}\t{}\n",
            self.overall.accuracy * 100.0,
            cell(&self.female, |m| format!("{:.2}", m.accuracy * 100.0)),
            cell(&self.male, |m| format!("{:.2}", m.accuracy * 100.0)),
            gap(self.accuracy_gap_pct, 2)
        ));
        s.push_str(&format!(
            "f1\t{:.4}\t{}\t{}\t{}\n",
            self.overall.f1,
            cell(&self.female, |m| format!("{:.4}", m.f1)),
            cell(&self.male, |m| format!("{:.4}", m.f1)),
            gap(self.f1_gap, 4)
        ));
        s
    }
}
