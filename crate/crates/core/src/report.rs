//! Clip prediction tables and their recombination into per-participant verdicts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ClipIndexRow;
use crate::error::{Error, Result};
use crate::model::Prediction;
use crate::phq::{self, Gender, GenderSplitReport, Metrics, Outcome, ParticipantResult, PhqRecord};

/// One row of the clip prediction CSV: predicted subscores `p1..p8` next to
/// the ground truth `t1..t8`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPredictionRow {
    pub clip_id: String,
    pub participant_id: String,
    pub gender: Gender,
    pub clip_index: usize,
    pub p1: u8,
    pub p2: u8,
    pub p3: u8,
    pub p4: u8,
    pub p5: u8,
    pub p6: u8,
    pub p7: u8,
    pub p8: u8,
    pub t1: u8,
    pub t2: u8,
    pub t3: u8,
    pub t4: u8,
    pub t5: u8,
    pub t6: u8,
    pub t7: u8,
    pub t8: u8,
    pub pred_score: u32,
    pub true_score: u32,
}

impl ClipPredictionRow {
    pub fn new(row: &ClipIndexRow, pred: &Prediction) -> Self {
        let p = pred.subscores;
        let t = row.subscores();
        let sum = |s: &[u8; 8]| s.iter().map(|&v| v as u32).sum();
        Self {
            clip_id: row.clip_id.clone(),
            participant_id: row.participant_id.clone(),
            gender: row.gender,
            clip_index: row.clip_index,
            p1: p[0],
            p2: p[1],
            p3: p[2],
            p4: p[3],
            p5: p[4],
            p6: p[5],
            p7: p[6],
            p8: p[7],
            t1: t[0],
            t2: t[1],
            t3: t[2],
            t4: t[3],
            t5: t[4],
            t6: t[5],
            t7: t[6],
            t8: t[7],
            pred_score: sum(&p),
            true_score: sum(&t),
        }
    }

    pub fn predicted(&self) -> [u8; 8] {
        [self.p1, self.p2, self.p3, self.p4, self.p5, self.p6, self.p7, self.p8]
    }

    pub fn truth(&self) -> [u8; 8] {
        [self.t1, self.t2, self.t3, self.t4, self.t5, self.t6, self.t7, self.t8]
    }
}

pub fn write_predictions(path: &Path, rows: &[ClipPredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<ClipPredictionRow>> {
    let text = fs::read_to_string(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ClipPredictionRow>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("{}: no prediction rows", path.display())));
    }
    Ok(rows)
}

/// Clip-level (gender, predicted, true) outcomes.
pub fn clip_entries(rows: &[ClipPredictionRow]) -> Result<Vec<(Gender, Outcome, Outcome)>> {
    rows.iter()
        .map(|r| {
            let p = phq::derive_phq(&r.predicted())?;
            let t = phq::derive_phq(&r.truth())?;
            Ok((r.gender, Outcome::from(&p), Outcome::from(&t)))
        })
        .collect()
}

pub fn clip_metrics(rows: &[ClipPredictionRow]) -> Result<Metrics> {
    let (p, t): (Vec<_>, Vec<_>) = clip_entries(rows)?.into_iter().map(|e| (e.1, e.2)).unzip();
    phq::compute_metrics(&p, &t)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticipantSummary {
    pub result: ParticipantResult,
    /// Interview-level ground truth.
    pub truth: PhqRecord,
}

/// Groups rows by participant in order of first appearance. All clips of a
/// participant must agree on gender and ground truth.
pub fn aggregate_predictions(rows: &[ClipPredictionRow]) -> Result<Vec<ParticipantSummary>> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.participant_id.as_str()) {
            order.push(&r.participant_id);
        }
    }
    order
        .into_iter()
        .map(|id| {
            let mine: Vec<&ClipPredictionRow> = rows.iter().filter(|r| r.participant_id == id).collect();
            let first = mine[0];
            if mine.iter().any(|r| r.gender != first.gender || r.truth() != first.truth()) {
                return Err(Error::Format(format!("participant {id}: clips disagree on gender or labels")));
            }
            let clips = mine
                .iter()
                .map(|r| phq::derive_phq(&r.predicted()))
                .collect::<Result<Vec<_>>>()?;
            Ok(ParticipantSummary {
                result: phq::aggregate_participant(id, first.gender, clips)?,
                truth: phq::derive_phq(&first.truth())?,
            })
        })
        .collect()
}

pub fn participant_report(summaries: &[ParticipantSummary]) -> Result<GenderSplitReport> {
    let entries: Vec<_> = summaries
        .iter()
        .map(|s| (s.result.gender, Outcome::from(&s.result), Outcome::from(&s.truth)))
        .collect();
    phq::gender_split_report(&entries)
}

pub const PARTICIPANT_HEADER: &str = "participant_id,gender,n_clips,pred_score,pred_binary,true_score,true_binary";

pub fn render_participants(summaries: &[ParticipantSummary]) -> String {
    let mut s = String::from(PARTICIPANT_HEADER);
    s.push('\n');
    for p in summaries {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.result.participant_id,
            p.result.gender,
            p.result.clips.len(),
            p.result.score,
            p.result.binary as u8,
            p.truth.score,
            p.truth.binary as u8
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(pid: &str, k: usize, pred: [u8; 8]) -> ClipPredictionRow {
        let index = ClipIndexRow {
            clip_id: format!("{pid}_c{k:03}"),
            participant_id: pid.into(),
            gender: Gender::Female,
            clip_index: k,
            start_s: 0.0,
            s1: 2,
            s2: 2,
            s3: 2,
            s4: 2,
            s5: 2,
            s6: 0,
            s7: 0,
            s8: 0,
            gb_augmented: 0,
        };
        ClipPredictionRow::new(
            &index,
            &Prediction {
                subscores: pred,
                probs: vec![],
            },
        )
    }

    #[test]
    fn tie_is_negative() {
        let rows = vec![row("A", 0, [3; 8]), row("A", 1, [0; 8])];
        let s = aggregate_predictions(&rows).unwrap();
        assert_eq!(s.len(), 1);
        assert!(!s[0].result.binary);
        assert_eq!(s[0].result.score, 12.0);
        assert_eq!(s[0].truth.score, 10);
    }

    #[test]
    fn inconsistent_labels_rejected() {
        let mut rows = vec![row("A", 0, [0; 8]), row("A", 1, [0; 8])];
        rows[1].t1 = 0;
        assert!(matches!(aggregate_predictions(&rows), Err(Error::Format(_))));
    }
}
