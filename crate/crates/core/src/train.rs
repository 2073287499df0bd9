//! Training runs, epoch logs and the fusion comparison harness.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::ClipSample;
use crate::fusion::FusionMethod;
use crate::model::{self, Model, ModelConfig, Modality, Prediction};
use crate::nn::ParamStore;
use crate::phq::{self, Gender, Metrics, Outcome};
use crate::sam::{Sam, SamConfig, SgdConfig};
use crate::sampling::{compute_sampler_weights, ClipLabel, SamplerMode};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub sam_rho: f64,
    /// Scale each KL row by the reciprocal batch frequency of its class.
    pub class_weighting: bool,
    /// `None` visits every clip once per epoch in shuffled order.
    pub sampler: Option<SamplerMode>,
    pub gender_balance: bool,
    pub seed: u64,
    /// Stop once eval-mode clip accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            momentum: 0.0,
            sam_rho: 0.05,
            class_weighting: true,
            sampler: Some(SamplerMode::Score),
            gender_balance: true,
            seed: 0,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn sam(&self) -> SamConfig {
        SamConfig {
            rho: self.sam_rho,
            sgd: SgdConfig {
                lr: self.lr,
                momentum: self.momentum,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
        }
        self.sam().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Eval-mode binary clip accuracy after the epoch.
    pub clip_accuracy: f64,
    pub female_accuracy: Option<f64>,
    pub male_accuracy: Option<f64>,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,loss,clip_accuracy,female_accuracy,male_accuracy";

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.loss,
            self.clip_accuracy,
            opt(self.female_accuracy),
            opt(self.male_accuracy)
        )
    }
}

pub fn render_epoch_log(records: &[EpochRecord]) -> String {
    let mut s = String::from(EPOCH_LOG_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.log_line());
        s.push('\n');
    }
    s
}

pub fn clip_outcomes(preds: &[Prediction], clips: &[ClipSample]) -> Result<Vec<(Gender, Outcome, Outcome)>> {
    preds
        .iter()
        .zip(clips)
        .map(|(p, c)| {
            let pr = p.record()?;
            let tr = phq::derive_phq(&c.subscores)?;
            Ok((c.gender, Outcome::from(&pr), Outcome::from(&tr)))
        })
        .collect()
}

fn accuracy_of(entries: &[(Gender, Outcome, Outcome)], gender: Option<Gender>) -> Option<f64> {
    let sel: Vec<_> = entries.iter().filter(|e| gender.is_none_or(|g| e.0 == g)).collect();
    if sel.is_empty() {
        return None;
    }
    Some(sel.iter().filter(|e| e.1.binary == e.2.binary).count() as f64 / sel.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: Vec<EpochRecord>,
    pub reached_target: bool,
}

/// Trains from `init` (or fresh parameters seeded by `cfg.seed`). The callback
/// sees every epoch record and the parameters after that epoch.
pub fn run_training<F>(
    model: &Model,
    clips: &[ClipSample],
    cfg: &TrainConfig,
    init: Option<ParamStore>,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &ParamStore) -> Result<()>,
{
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::EmptyInput("no training clips".into()));
    }
    let inputs = model::prepare_inputs(clips, model.cfg.modality)?;
    let mut store = init.unwrap_or_else(|| model.init(cfg.seed));
    let mut sam = Sam::new(cfg.sam())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let weights = match cfg.sampler {
        Some(mode) => {
            let labels: Vec<ClipLabel> = clips.iter().map(ClipLabel::from).collect();
            Some(compute_sampler_weights(&labels, mode, cfg.gender_balance)?)
        }
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut reached_target = false;
    for epoch in 1..=cfg.epochs {
        let order = match &weights {
            Some(w) => w.sample(clips.len(), &mut rng)?,
            None => {
                let mut o: Vec<usize> = (0..clips.len()).collect();
                o.shuffle(&mut rng);
                o
            }
        };
        let stats = model::train_epoch(model, &mut store, &mut sam, &inputs, &order, cfg.batch_size, cfg.class_weighting)?;
        let preds = model::predict(model, &store, &inputs, cfg.batch_size)?;
        let outcomes = clip_outcomes(&preds, clips)?;
        let record = EpochRecord {
            epoch,
            loss: stats.mean_loss,
            clip_accuracy: accuracy_of(&outcomes, None).unwrap_or(0.0),
            female_accuracy: accuracy_of(&outcomes, Some(Gender::Female)),
            male_accuracy: accuracy_of(&outcomes, Some(Gender::Male)),
        };
        on_epoch(&record, &store)?;
        let done = cfg.target_accuracy.is_some_and(|t| record.clip_accuracy >= t);
        log.push(record);
        if done {
            reached_target = true;
            break;
        }
    }
    Ok(TrainOutcome {
        store,
        log,
        reached_target,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub modality: String,
    pub fusion: String,
    pub epochs: usize,
    pub final_loss: f64,
    pub metrics: Metrics,
}

/// Trains one model per (modality, fusion) pair on `train` and scores it on
/// `eval` at clip level.
pub fn compare_fusions(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    modalities: &[Modality],
    methods: &[FusionMethod],
    train: &[ClipSample],
    eval: &[ClipSample],
) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for &method in methods {
        for &modality in modalities {
            let model = Model::new(ModelConfig {
                modality,
                fusion: method,
                ..base.clone()
            })?;
            let out = run_training(&model, train, train_cfg, None, |_, _| Ok(()))?;
            let preds = model::predict_clips(&model, &out.store, eval, train_cfg.batch_size)?;
            let (p, t): (Vec<_>, Vec<_>) = clip_outcomes(&preds, eval)?.into_iter().map(|e| (e.1, e.2)).unzip();
            rows.push(ComparisonRow {
                modality: modality.key().to_ascii_uppercase(),
                fusion: method.title().to_string(),
                epochs: out.log.len(),
                final_loss: out.log.last().map(|r| r.loss).unwrap_or(f64::NAN),
                metrics: phq::compute_metrics(&p, &t)?,
            });
        }
    }
    Ok(rows)
}

/// Fusion methods as rows, one accuracy/F1 column pair per modality set.
pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut modalities: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !modalities.contains(&r.modality.as_str()) {
            modalities.push(&r.modality);
        }
        if !methods.contains(&r.fusion.as_str()) {
            methods.push(&r.fusion);
        }
    }
    let mut s = String::from("fusion");
    for m in &modalities {
        let _ = write!(s, "\t{m} acc_pct\t{m} f1");
    }
    s.push('\n');
    for method in &methods {
        s.push_str(method);
        for m in &modalities {
            match rows.iter().find(|r| r.fusion == *method && r.modality == *m) {
                Some(r) => {
                    let _ = write!(s, "\t{:.2}\t{:.4}", r.metrics.accuracy * 100.0, r.metrics.f1);
                }
                None => s.push_str("\t-\t-"),
            }
        }
        s.push('\n');
    }
    s
}
