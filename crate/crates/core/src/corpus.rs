//! Dataset manifest, synthetic interview corpus, and clip preprocessing.
//!
//! The synthetic corpus stands in for the restricted clinical recordings. Every
//! modality carries the eight subscores:
//! - audio: eight fixed tones, tone `k` has amplitude rising with subscore `k`;
//! - keypoints: the 68 facial points form eight groups, group `k` is displaced
//!   and oscillates proportionally to subscore `k`;
//! - sentence embeddings: a sum of eight fixed directions weighted by the
//!   centred subscores, plus noise.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    self, ClipConfig, ClipSample, KeypointFrame, SentenceEmbedding, Session, EMBED_DIM, N_FACE_POINTS,
};
use crate::io;
use crate::phq::{self, Gender, MAX_SUBSCORE};
use crate::signal::{self, Waveform, DEFAULT_SAMPLE_RATE};

/// Tone frequencies (Hz) carrying the audio signal, one per subscore.
pub const TONE_HZ: [u32; 8] = [250, 354, 500, 707, 1000, 1414, 2000, 2828];
const DIRECTION_SEED: u64 = 0x5eed_d1e5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub gender: Gender,
    pub subscores: [u8; 8],
    /// Paths as written in the manifest (relative to its directory or absolute).
    pub audio: PathBuf,
    pub keypoints: PathBuf,
    pub embeddings: PathBuf,
    /// Marks a session produced by gender-balancing augmentation.
    pub gb_augmented: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    gender: Gender,
    s1: u8,
    s2: u8,
    s3: u8,
    s4: u8,
    s5: u8,
    s6: u8,
    s7: u8,
    s8: u8,
    audio: String,
    keypoints: String,
    embeddings: String,
    gb_augmented: u8,
}

impl ManifestRow {
    fn from_entry(e: &ManifestEntry) -> Self {
        let s = e.subscores;
        Self {
            id: e.id.clone(),
            gender: e.gender,
            s1: s[0],
            s2: s[1],
            s3: s[2],
            s4: s[3],
            s5: s[4],
            s6: s[5],
            s7: s[6],
            s8: s[7],
            audio: e.audio.display().to_string(),
            keypoints: e.keypoints.display().to_string(),
            embeddings: e.embeddings.display().to_string(),
            gb_augmented: e.gb_augmented as u8,
        }
    }

    fn into_entry(self) -> ManifestEntry {
        ManifestEntry {
            id: self.id,
            gender: self.gender,
            subscores: [self.s1, self.s2, self.s3, self.s4, self.s5, self.s6, self.s7, self.s8],
            audio: self.audio.into(),
            keypoints: self.keypoints.into(),
            embeddings: self.embeddings.into(),
            gb_augmented: self.gb_augmented != 0,
        }
    }
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Reads and validates a manifest; referenced files must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let entries: Vec<ManifestEntry> = rdr
            .deserialize::<ManifestRow>()
            .map(|r| r.map(ManifestRow::into_entry))
            .collect::<std::result::Result<_, _>>()?;
        let m = Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyInput("manifest has no participants".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.id) {
                return Err(Error::Format(format!("duplicate participant id {}", e.id)));
            }
            phq::derive_phq(&e.subscores).map_err(|err| Error::Format(format!("participant {}: {err}", e.id)))?;
            for p in [&e.audio, &e.keypoints, &e.embeddings] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Format(format!("participant {}: missing file {}", e.id, full.display())));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(ManifestRow::from_entry(e))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_participants: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub positive_fraction: f64,
    pub sample_rate: u32,
    pub visual_fps: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_participants: 20,
            min_duration_s: 160.0,
            max_duration_s: 200.0,
            positive_fraction: 0.3,
            sample_rate: DEFAULT_SAMPLE_RATE,
            visual_fps: signal::DEFAULT_VISUAL_RATE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticParticipant {
    pub id: String,
    pub gender: Gender,
    pub subscores: [u8; 8],
    pub audio: Waveform,
    /// Raw (unnormalized) keypoints.
    pub keypoints: Vec<KeypointFrame>,
    pub embeddings: Vec<SentenceEmbedding>,
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Subscores whose total lands well inside the requested binary class, so
/// small per-item errors do not flip the verdict.
fn sample_subscores(rng: &mut ChaCha8Rng, positive: bool) -> [u8; 8] {
    loop {
        let s: [u8; 8] = std::array::from_fn(|_| rng.gen_range(0..=MAX_SUBSCORE));
        let total: u32 = s.iter().map(|&v| v as u32).sum();
        if (positive && total >= 13) || (!positive && total <= 7) {
            return s;
        }
    }
}

fn synth_audio(rng: &mut ChaCha8Rng, subscores: &[u8; 8], duration_s: f64, sr: u32) -> Result<Waveform> {
    let n = (duration_s * sr as f64).round() as usize;
    let table: Vec<f64> = (0..sr).map(|i| (2.0 * PI * i as f64 / sr as f64).sin()).collect();
    let amps: Vec<f64> = subscores.iter().map(|&s| 0.01 + 0.025 * s as f64).collect();
    let phases: Vec<u64> = (0..8).map(|_| rng.gen_range(0..sr as u64)).collect();
    let noise = Normal::new(0.0, 0.01).unwrap();
    let samples = (0..n)
        .map(|i| {
            let mut v = noise.sample(rng);
            for k in 0..8 {
                let idx = (TONE_HZ[k] as u64 * i as u64 + phases[k]) % sr as u64;
                v += amps[k] * table[idx as usize];
            }
            // 16-bit quantization so in-memory and on-disk audio agree
            (v.clamp(-1.0, 32767.0 / 32768.0) * 32768.0).round() / 32768.0
        })
        .collect();
    Waveform::new(samples, sr)
}

fn synth_keypoints(rng: &mut ChaCha8Rng, subscores: &[u8; 8], duration_s: f64, fps: u32) -> Result<Vec<KeypointFrame>> {
    let n = (duration_s * fps as f64).floor() as usize;
    let noise = Normal::new(0.0, 0.005).unwrap();
    let phase: Vec<f64> = (0..N_FACE_POINTS).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    (0..n)
        .map(|f| {
            let t = f as f64 / fps as f64;
            let mut points = Vec::with_capacity(features::FRAME_ROWS);
            for j in 0..N_FACE_POINTS {
                let k = j % 8;
                let s = subscores[k] as f64;
                let theta = 2.0 * PI * j as f64 / N_FACE_POINTS as f64;
                let r = 1.0 + 0.06 * s + 0.02 * (1.0 + s) * (2.0 * PI * 0.7 * t + phase[j]).sin();
                points.push([
                    round4(r * theta.cos() + noise.sample(rng)),
                    round4(1.2 * r * theta.sin() + noise.sample(rng)),
                    round4(0.1 * (3.0 * theta).sin() + 0.02 * s + noise.sample(rng)),
                ]);
            }
            for g in 0..features::N_GAZE_ROWS {
                let (x, y) = (0.1 * (0.3 * t + g as f64).sin(), 0.1 * (0.2 * t + g as f64).cos());
                let norm = (x * x + y * y + 1.0).sqrt();
                points.push([round4(x / norm), round4(y / norm), round4(-1.0 / norm)]);
            }
            KeypointFrame::new(round4(t), points)
        })
        .collect()
}

fn class_directions() -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(DIRECTION_SEED);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..8)
        .map(|_| {
            let v: Vec<f64> = (0..EMBED_DIM).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn synth_embeddings(
    rng: &mut ChaCha8Rng,
    subscores: &[u8; 8],
    duration_s: f64,
    dirs: &[Vec<f64>],
) -> Result<Vec<SentenceEmbedding>> {
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        let start = round4(t + rng.gen_range(0.3..1.5));
        let stop = round4(start + rng.gen_range(2.0..5.0));
        if stop > duration_s {
            break;
        }
        let vector = (0..EMBED_DIM)
            .map(|j| {
                let signal: f64 = (0..8).map(|k| (subscores[k] as f64 - 1.5) / 1.5 * dirs[k][j]).sum();
                round4(signal + noise.sample(rng))
            })
            .collect();
        out.push(SentenceEmbedding::new(start, stop, vector)?);
        t = stop;
    }
    Ok(out)
}

/// Builds the corpus in memory. Both binary classes and both genders are
/// present; genders alternate within each class.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<SyntheticParticipant>> {
    if cfg.n_participants < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 participants to cover both classes, got {}",
            cfg.n_participants
        )));
    }
    if !(cfg.min_duration_s > 0.0 && cfg.min_duration_s <= cfg.max_duration_s) {
        return Err(Error::InvalidConfig("need 0 < min duration <= max duration".into()));
    }
    if !(0.0..=1.0).contains(&cfg.positive_fraction) {
        return Err(Error::InvalidConfig("positive fraction must be in [0, 1]".into()));
    }
    let n = cfg.n_participants;
    let n_pos = ((n as f64 * cfg.positive_fraction).round() as usize).clamp(1, n - 1);
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut master);
    let mut positive = vec![false; n];
    let mut gender = vec![Gender::Female; n];
    for (rank, &i) in order.iter().enumerate() {
        positive[i] = rank < n_pos;
        let within = if rank < n_pos { rank } else { rank - n_pos };
        gender[i] = if within % 2 == 0 { Gender::Female } else { Gender::Male };
    }
    let dirs = class_directions();
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
            let subscores = sample_subscores(&mut rng, positive[i]);
            let duration = if cfg.max_duration_s > cfg.min_duration_s {
                rng.gen_range(cfg.min_duration_s..cfg.max_duration_s)
            } else {
                cfg.min_duration_s
            };
            Ok(SyntheticParticipant {
                id: format!("P{i:03}"),
                gender: gender[i],
                subscores,
                audio: synth_audio(&mut rng, &subscores, duration, cfg.sample_rate)?,
                keypoints: synth_keypoints(&mut rng, &subscores, duration, cfg.visual_fps)?,
                embeddings: synth_embeddings(&mut rng, &subscores, duration, &dirs)?,
            })
        })
        .collect()
}

/// Writes the synthetic corpus plus `manifest.csv` under `out_dir`.
pub fn generate_synthetic_corpus(out_dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    let participants = synthesize(cfg)?;
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(participants.len());
    for p in &participants {
        let audio = PathBuf::from(format!("{}.wav", p.id));
        let keypoints = PathBuf::from(format!("{}_keypoints.csv", p.id));
        let embeddings = PathBuf::from(format!("{}_embeddings.csv", p.id));
        signal::write_wav(&out_dir.join(&audio), &p.audio)?;
        features::write_keypoints(&out_dir.join(&keypoints), &p.keypoints)?;
        features::write_embeddings(&out_dir.join(&embeddings), &p.embeddings)?;
        entries.push(ManifestEntry {
            id: p.id.clone(),
            gender: p.gender,
            subscores: p.subscores,
            audio,
            keypoints,
            embeddings,
            gb_augmented: false,
        });
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepConfig {
    pub clip: ClipConfig,
    /// Drop low-energy audio before clipping. Shifts the audio clock relative
    /// to the other modalities, so it is off by default.
    pub audio_reclip: bool,
    pub reclip_threshold: f64,
    pub reclip_min_segment_s: f64,
    /// Keep only keypoint frames inside transcribed sentences.
    pub visual_crop: bool,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            clip: ClipConfig::default(),
            audio_reclip: false,
            reclip_threshold: 0.01,
            reclip_min_segment_s: 0.5,
            visual_crop: false,
        }
    }
}

/// Normalizes keypoints and applies the optional crops.
pub fn prepare_session(
    id: &str,
    gender: Gender,
    subscores: [u8; 8],
    audio: Waveform,
    keypoints: &[KeypointFrame],
    embeddings: Vec<SentenceEmbedding>,
    prep: &PrepConfig,
) -> Result<Session> {
    let audio = if prep.audio_reclip {
        signal::reclip_audio(&audio, &prep.clip.stft, prep.reclip_threshold, prep.reclip_min_segment_s)?
    } else {
        audio
    };
    let mut frames = features::normalize_keypoints(keypoints)?.frames;
    if prep.visual_crop {
        let intervals: Vec<(f64, f64)> = embeddings.iter().map(|e| (e.start_s, e.stop_s)).collect();
        frames = features::crop_by_timestamps(&frames, &intervals)?;
    }
    Ok(Session {
        participant_id: id.to_string(),
        gender,
        subscores,
        audio,
        keypoints: frames,
        embeddings,
    })
}

pub fn participant_clips(p: &SyntheticParticipant, prep: &PrepConfig) -> Result<Vec<ClipSample>> {
    let session = prepare_session(
        &p.id,
        p.gender,
        p.subscores,
        p.audio.clone(),
        &p.keypoints,
        p.embeddings.clone(),
        prep,
    )?;
    features::sliding_window_clips(&session, &prep.clip)
}

/// In-memory clips for a whole synthetic corpus.
pub fn synthetic_clips(participants: &[SyntheticParticipant], prep: &PrepConfig) -> Result<Vec<ClipSample>> {
    let mut out = Vec::new();
    for p in participants {
        out.extend(participant_clips(p, prep)?);
    }
    Ok(out)
}

pub fn load_session(manifest: &Manifest, e: &ManifestEntry, prep: &PrepConfig) -> Result<Session> {
    let audio = signal::read_wav(&manifest.resolve(&e.audio))?;
    let keypoints = features::read_keypoints(&manifest.resolve(&e.keypoints))?;
    let embeddings = features::ingest_embeddings(&manifest.resolve(&e.embeddings))?;
    prepare_session(&e.id, e.gender, e.subscores, audio, &keypoints, embeddings, prep)
}

/// One row of `index.csv` in a preprocessed clip directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipIndexRow {
    pub clip_id: String,
    pub participant_id: String,
    pub gender: Gender,
    pub clip_index: usize,
    pub start_s: f64,
    pub s1: u8,
    pub s2: u8,
    pub s3: u8,
    pub s4: u8,
    pub s5: u8,
    pub s6: u8,
    pub s7: u8,
    pub s8: u8,
    pub gb_augmented: u8,
}

impl ClipIndexRow {
    pub fn subscores(&self) -> [u8; 8] {
        [self.s1, self.s2, self.s3, self.s4, self.s5, self.s6, self.s7, self.s8]
    }
}

pub const CLIP_INDEX: &str = "index.csv";

pub fn clip_id(participant_id: &str, k: usize) -> String {
    format!("{participant_id}_c{k:03}")
}

/// Reads every session in the manifest, cuts clips and writes one bundle
/// directory per clip (`audio.mftk`, `visual.mftk`, `text.mftk`) plus
/// `index.csv`. Output bytes depend only on the inputs and `prep`.
pub fn preprocess(manifest: &Manifest, prep: &PrepConfig, out_dir: &Path) -> Result<Vec<ClipIndexRow>> {
    let clips_dir = out_dir.join("clips");
    fs::create_dir_all(&clips_dir)?;
    let mut rows = Vec::new();
    for e in &manifest.entries {
        let session = load_session(manifest, e, prep)?;
        for clip in features::sliding_window_clips(&session, &prep.clip)? {
            let id = clip_id(&e.id, clip.clip_index);
            let dir = clips_dir.join(&id);
            fs::create_dir_all(&dir)?;
            io::write_tensor(&dir.join("audio.mftk"), &clip.audio)?;
            io::write_tensor(&dir.join("visual.mftk"), &clip.visual)?;
            io::write_tensor(&dir.join("text.mftk"), &clip.text)?;
            let s = clip.subscores;
            rows.push(ClipIndexRow {
                clip_id: id,
                participant_id: e.id.clone(),
                gender: e.gender,
                clip_index: clip.clip_index,
                start_s: clip.start_s,
                s1: s[0],
                s2: s[1],
                s3: s[2],
                s4: s[3],
                s5: s[4],
                s6: s[5],
                s7: s[6],
                s8: s[7],
                gb_augmented: e.gb_augmented as u8,
            });
        }
    }
    let mut w = csv::Writer::from_path(out_dir.join(CLIP_INDEX))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct ClipSet {
    pub rows: Vec<ClipIndexRow>,
    pub clips: Vec<ClipSample>,
}

/// Loads a directory written by [`preprocess`].
pub fn load_clips(dir: &Path) -> Result<ClipSet> {
    let index = dir.join(CLIP_INDEX);
    let text = fs::read_to_string(&index).map_err(|e| Error::Format(format!("{}: {e}", index.display())))?;
    let rows: Vec<ClipIndexRow> = csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", index.display())))?;
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("{} lists no clips", dir.join(CLIP_INDEX).display())));
    }
    let clips = rows
        .iter()
        .map(|r| {
            let bundle = dir.join("clips").join(&r.clip_id);
            Ok(ClipSample {
                participant_id: r.participant_id.clone(),
                gender: r.gender,
                clip_index: r.clip_index,
                start_s: r.start_s,
                subscores: r.subscores(),
                audio: io::read_tensor(&bundle.join("audio.mftk"))?,
                visual: io::read_tensor(&bundle.join("visual.mftk"))?,
                text: io::read_tensor(&bundle.join("text.mftk"))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ClipSet { rows, clips })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_participants: 4,
            min_duration_s: 61.0,
            max_duration_s: 62.0,
            ..Default::default()
        }
    }

    #[test]
    fn stratified_and_deterministic() {
        let a = synthesize(&small()).unwrap();
        let b = synthesize(&small()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.subscores, y.subscores);
            assert_eq!(x.audio, y.audio);
            assert_eq!(x.keypoints, y.keypoints);
        }
        let binaries: BTreeSet<bool> = a.iter().map(|p| phq::derive_phq(&p.subscores).unwrap().binary).collect();
        assert_eq!(binaries.len(), 2);
        let genders: BTreeSet<Gender> = a.iter().map(|p| p.gender).collect();
        assert_eq!(genders.len(), 2);
    }

    #[test]
    fn too_few_participants() {
        let cfg = SynthConfig { n_participants: 1, ..small() };
        assert!(matches!(synthesize(&cfg), Err(Error::InvalidConfig(_))));
    }
}
