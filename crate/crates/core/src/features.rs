//! Visual/text preprocessing and the sliding-window clipper.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::phq::Gender;
use crate::signal::{self, MelConfig, StftConfig, Waveform};

pub const N_FACE_POINTS: usize = 68;
pub const N_GAZE_ROWS: usize = 4;
pub const FRAME_ROWS: usize = N_FACE_POINTS + N_GAZE_ROWS;
pub const EMBED_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame {
    pub timestamp_s: f64,
    /// 68 facial keypoints followed by 4 gaze-direction rows.
    pub points: Vec<[f64; 3]>,
}

impl KeypointFrame {
    pub fn new(timestamp_s: f64, points: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() != FRAME_ROWS {
            return Err(Error::Shape(format!(
                "keypoint frame needs {FRAME_ROWS} rows, got {}",
                points.len()
            )));
        }
        Ok(Self { timestamp_s, points })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedKeypoints {
    pub frames: Vec<KeypointFrame>,
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Axes whose range was zero; those were set to 0.5.
    pub degenerate: [bool; 3],
}

impl NormalizedKeypoints {
    /// Undoes the mapping on the facial rows of non-degenerate axes.
    pub fn denormalize(&self) -> Vec<KeypointFrame> {
        let mut out = self.frames.clone();
        for f in &mut out {
            for p in &mut f.points[..N_FACE_POINTS] {
                for a in 0..3 {
                    if !self.degenerate[a] {
                        p[a] = self.min[a] + p[a] * (self.max[a] - self.min[a]);
                    }
                }
            }
        }
        out
    }
}

/// Per-axis min-max scaling to [0, 1] over all facial keypoints of the whole
/// sequence. Gaze rows are copied through unchanged.
pub fn normalize_keypoints(frames: &[KeypointFrame]) -> Result<NormalizedKeypoints> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("no keypoint frames".into()));
    }
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for f in frames {
        for p in &f.points[..N_FACE_POINTS] {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
    }
    let degenerate = [0, 1, 2].map(|a| max[a] == min[a]);
    let frames = frames
        .iter()
        .map(|f| {
            let mut points = f.points.clone();
            for p in &mut points[..N_FACE_POINTS] {
                for a in 0..3 {
                    p[a] = if degenerate[a] {
                        0.5
                    } else {
                        ((p[a] - min[a]) / (max[a] - min[a])).clamp(0.0, 1.0)
                    };
                }
            }
            KeypointFrame {
                timestamp_s: f.timestamp_s,
                points,
            }
        })
        .collect();
    Ok(NormalizedKeypoints {
        frames,
        min,
        max,
        degenerate,
    })
}

/// Keeps frames whose timestamp lies in some `[start, stop)`.
pub fn crop_by_timestamps(frames: &[KeypointFrame], intervals: &[(f64, f64)]) -> Result<Vec<KeypointFrame>> {
    for (i, &(a, b)) in intervals.iter().enumerate() {
        if !(a < b) {
            return Err(Error::Domain(format!("interval {i} is empty: [{a}, {b})")));
        }
        if i > 0 && intervals[i - 1].1 > a {
            return Err(Error::Domain("intervals must be sorted and non-overlapping".into()));
        }
    }
    let kept: Vec<KeypointFrame> = frames
        .iter()
        .filter(|f| intervals.iter().any(|&(a, b)| f.timestamp_s >= a && f.timestamp_s < b))
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyOutput("no frames inside the given intervals".into()));
    }
    Ok(kept)
}

fn parse_row(line: &str, lineno: usize, path: &Path) -> Result<Vec<f64>> {
    line.split(',')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|e| {
                Error::Format(format!("{}:{}: bad number {s:?}: {e}", path.display(), lineno + 1))
            })
        })
        .collect()
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// One frame per line: timestamp then 216 values (row-major 72×3).
pub fn read_keypoints(path: &Path) -> Result<Vec<KeypointFrame>> {
    let text = fs::read_to_string(path)?;
    let mut frames = Vec::new();
    for (i, line) in data_lines(&text) {
        let row = parse_row(line, i, path)?;
        if row.len() != 1 + FRAME_ROWS * 3 {
            return Err(Error::Format(format!(
                "{}:{}: expected {} values, got {}",
                path.display(),
                i + 1,
                1 + FRAME_ROWS * 3,
                row.len()
            )));
        }
        let points = row[1..].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        frames.push(KeypointFrame::new(row[0], points)?);
    }
    Ok(frames)
}

pub fn write_keypoints(path: &Path, frames: &[KeypointFrame]) -> Result<()> {
    let mut out = String::new();
    for f in frames {
        out.push_str(&f.timestamp_s.to_string());
        for p in &f.points {
            for v in p {
                out.push(',');
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub start_s: f64,
    pub stop_s: f64,
    pub vector: Vec<f64>,
}

impl SentenceEmbedding {
    pub fn new(start_s: f64, stop_s: f64, vector: Vec<f64>) -> Result<Self> {
        if vector.len() != EMBED_DIM {
            return Err(Error::Format(format!(
                "embedding must have {EMBED_DIM} values, got {}",
                vector.len()
            )));
        }
        if !(start_s < stop_s) {
            return Err(Error::Format(format!("sentence interval [{start_s}, {stop_s}) is empty")));
        }
        Ok(Self { start_s, stop_s, vector })
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start_s + self.stop_s)
    }
}

/// Per line: start, stop, then 512 values. Rows must be sorted by start.
pub fn ingest_embeddings(path: &Path) -> Result<Vec<SentenceEmbedding>> {
    let text = fs::read_to_string(path)?;
    let mut out: Vec<SentenceEmbedding> = Vec::new();
    for (i, line) in data_lines(&text) {
        let row = parse_row(line, i, path)?;
        if row.len() < 2 {
            return Err(Error::Format(format!("{}:{}: missing timestamps", path.display(), i + 1)));
        }
        let e = SentenceEmbedding::new(row[0], row[1], row[2..].to_vec())
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if let Some(prev) = out.last() {
            if e.start_s < prev.start_s {
                return Err(Error::Format(format!(
                    "{}:{}: timestamps not monotone",
                    path.display(),
                    i + 1
                )));
            }
        }
        out.push(e);
    }
    Ok(out)
}

/// Values are written at single precision.
pub fn write_embeddings(path: &Path, embeddings: &[SentenceEmbedding]) -> Result<()> {
    let mut out = String::new();
    for e in embeddings {
        out.push_str(&format!("{},{}", e.start_s, e.stop_s));
        for v in &e.vector {
            out.push(',');
            out.push_str(&(*v as f32).to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// A full interview with all three modalities on a shared clock.
#[derive(Debug, Clone)]
pub struct Session {
    pub participant_id: String,
    pub gender: Gender,
    pub subscores: [u8; 8],
    pub audio: Waveform,
    /// Already normalized.
    pub keypoints: Vec<KeypointFrame>,
    pub embeddings: Vec<SentenceEmbedding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipConfig {
    pub window_s: f64,
    pub overlap_s: f64,
    pub visual_fps: u32,
    pub max_sentences: usize,
    pub stft: StftConfig,
    pub mel: MelConfig,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            window_s: 60.0,
            overlap_s: 10.0,
            visual_fps: signal::DEFAULT_VISUAL_RATE,
            max_sentences: 32,
            stft: StftConfig::default(),
            mel: MelConfig::default(),
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0) || !(self.overlap_s >= 0.0) || self.overlap_s >= self.window_s {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= overlap ({}) < window ({})",
                self.overlap_s, self.window_s
            )));
        }
        if self.visual_fps == 0 || self.max_sentences == 0 {
            return Err(Error::InvalidConfig("visual fps and max sentences must be positive".into()));
        }
        self.stft.validate()
    }

    pub fn stride_s(&self) -> f64 {
        self.window_s - self.overlap_s
    }

    pub fn visual_frames(&self) -> usize {
        (self.window_s * self.visual_fps as f64).round() as usize
    }

    pub fn audio_frames(&self, sample_rate: u32) -> usize {
        let n = (self.window_s * sample_rate as f64).round() as usize;
        self.stft.frame_count(n)
    }
}

/// `max(0, ⌊(D − window)/(window − overlap)⌋ + 1)`.
pub fn clip_count(duration_s: f64, window_s: f64, overlap_s: f64) -> usize {
    if duration_s < window_s {
        return 0;
    }
    ((duration_s - window_s) / (window_s - overlap_s)).floor() as usize + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub participant_id: String,
    pub gender: Gender,
    pub clip_index: usize,
    pub start_s: f64,
    pub subscores: [u8; 8],
    /// Standardized log-mel, `[n_mels, frames]`.
    pub audio: Tensor,
    /// `[frames, 72, 3]`.
    pub visual: Tensor,
    /// `[max_sentences, 512]`, zero rows as padding.
    pub text: Tensor,
}

fn visual_window(frames: &[KeypointFrame], start: f64, stop: f64, n_out: usize) -> Result<Tensor> {
    let inside = crop_by_timestamps(frames, &[(start, stop)])?;
    let mut data = Vec::with_capacity(n_out * FRAME_ROWS * 3);
    for k in 0..n_out {
        let f = &inside[k.min(inside.len() - 1)];
        data.extend(f.points.iter().flat_map(|p| p.iter().copied()));
    }
    Tensor::new(vec![n_out, FRAME_ROWS, 3], data)
}

fn text_window(embeddings: &[SentenceEmbedding], start: f64, stop: f64, max_sentences: usize) -> Result<Tensor> {
    let mut data = vec![0.0; max_sentences * EMBED_DIM];
    let members = embeddings.iter().filter(|e| {
        let m = e.midpoint();
        m >= start && m < stop
    });
    for (row, e) in members.take(max_sentences).enumerate() {
        data[row * EMBED_DIM..(row + 1) * EMBED_DIM].copy_from_slice(&e.vector);
    }
    Tensor::new(vec![max_sentences, EMBED_DIM], data)
}

/// Cuts a session into overlapping windows; trailing partial windows are
/// dropped. Visual frames are selected by timestamp and padded by repeating
/// the last one (or truncated) to exactly `window_s · fps` frames.
pub fn sliding_window_clips(session: &Session, cfg: &ClipConfig) -> Result<Vec<ClipSample>> {
    cfg.validate()?;
    let duration = session.audio.duration_s();
    let n = clip_count(duration, cfg.window_s, cfg.overlap_s);
    if n == 0 {
        return Err(Error::EmptyOutput(format!(
            "session {} lasts {duration:.1} s, shorter than one {} s window",
            session.participant_id, cfg.window_s
        )));
    }
    let sr = session.audio.sample_rate_hz;
    let bank = signal::mel_filterbank(&cfg.mel, cfg.stft.fft_len, sr)?;
    let n_samples = (cfg.window_s * sr as f64).round() as usize;
    let mut clips = Vec::with_capacity(n);
    for k in 0..n {
        let start = k as f64 * cfg.stride_s();
        let stop = start + cfg.window_s;
        let a = (start * sr as f64).round() as usize;
        let wave = Waveform::new(session.audio.samples[a..a + n_samples].to_vec(), sr)?;
        let grid = signal::standardize(&signal::log_mel_with_bank(&wave, &cfg.stft, &bank)?)?;
        let audio = Tensor::new(vec![grid.n_bins, grid.n_frames], grid.values)?;
        clips.push(ClipSample {
            participant_id: session.participant_id.clone(),
            gender: session.gender,
            clip_index: k,
            start_s: start,
            subscores: session.subscores,
            audio,
            visual: visual_window(&session.keypoints, start, stop, cfg.visual_frames())?,
            text: text_window(&session.embeddings, start, stop, cfg.max_sentences)?,
        });
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(t: f64, v: f64) -> KeypointFrame {
        KeypointFrame::new(t, vec![[v, v * 2.0, 7.0]; FRAME_ROWS]).unwrap()
    }

    #[test]
    fn normalize_axis_values() {
        let frames: Vec<_> = [2.0, 4.0, 6.0].iter().map(|&v| frame(0.0, v)).collect();
        let n = normalize_keypoints(&frames).unwrap();
        let xs: Vec<f64> = n.frames.iter().map(|f| f.points[0][0]).collect();
        assert_eq!(xs, vec![0.0, 0.5, 1.0]);
        assert_eq!(n.degenerate, [false, false, true]);
        assert!(n.frames.iter().all(|f| f.points[0][2] == 0.5));
        // gaze rows untouched
        assert_eq!(n.frames[0].points[70], [2.0, 4.0, 7.0]);
    }

    #[test]
    fn crop_examples() {
        let frames: Vec<_> = (0..10).map(|t| frame(t as f64, 1.0)).collect();
        let c = crop_by_timestamps(&frames, &[(2.5, 5.5)]).unwrap();
        let ts: Vec<f64> = c.iter().map(|f| f.timestamp_s).collect();
        assert_eq!(ts, vec![3.0, 4.0, 5.0]);
        assert_eq!(crop_by_timestamps(&frames, &[(-1.0, 100.0)]).unwrap(), frames);
        assert!(matches!(crop_by_timestamps(&frames, &[]), Err(Error::EmptyOutput(_))));
        assert!(crop_by_timestamps(&frames, &[(3.0, 5.0), (4.0, 6.0)]).is_err());
    }

    #[test]
    fn clip_counts() {
        assert_eq!(clip_count(120.0, 60.0, 10.0), 2);
        assert_eq!(clip_count(60.0, 60.0, 10.0), 1);
        assert_eq!(clip_count(59.0, 60.0, 10.0), 0);
        assert_eq!(clip_count(160.0, 60.0, 10.0), 3);
    }

    #[test]
    fn default_frame_counts() {
        let cfg = ClipConfig::default();
        assert_eq!(cfg.audio_frames(16_000), (60 * 16_000 - 1024) / 533 + 1);
        assert_eq!(cfg.visual_frames(), 1800);
    }
}
