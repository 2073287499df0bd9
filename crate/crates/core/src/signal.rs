//! Audio front-end.
//!
//! Raw waveform → (optional) energy-based reclipping → Hann-windowed STFT →
//! power spectrogram → triangular mel filterbank → natural-log compression →
//! whole-grid standardization.
//!
//! The forward DFT is unnormalized: `X[m,k] = Σ_n x[n+mH]·w[n]·exp(-j2πnk/N_fft)`.
//! Only the one-sided bins `0..=N_fft/2` are returned.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Floor added before the log so silent cells stay finite.
pub const LOG_FLOOR: f64 = 1e-10;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_VISUAL_RATE: u32 = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("waveform has no samples".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Samples in `[start_s, start_s + len_s)`, clamped to the signal.
    pub fn segment(&self, start_s: f64, len_s: f64) -> Result<Waveform> {
        let sr = self.sample_rate_hz as f64;
        let a = ((start_s * sr).round() as usize).min(self.samples.len());
        let b = (((start_s + len_s) * sr).round() as usize).min(self.samples.len());
        Waveform::new(self.samples[a..b].to_vec(), self.sample_rate_hz)
    }
}

/// Reads a mono 16-bit PCM WAV file; samples are scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM",
            path.display()
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV file, clipping to the representable range.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_len: usize,
}

impl Default for StftConfig {
    /// 64 ms window, hop = ⌊16000 / 30⌋ so one audio frame lines up with one video frame.
    fn default() -> Self {
        Self {
            window_len: 1024,
            hop: (DEFAULT_SAMPLE_RATE / DEFAULT_VISUAL_RATE) as usize,
            fft_len: 1024,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 {
            return Err(Error::InvalidConfig("window length must be >= 2".into()));
        }
        if self.hop == 0 {
            return Err(Error::InvalidConfig("hop must be >= 1".into()));
        }
        if self.fft_len < self.window_len {
            return Err(Error::InvalidConfig(format!(
                "fft length {} shorter than window {}",
                self.fft_len, self.window_len
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// ⌊(N − L)/H⌋ + 1, or 0 when the signal is shorter than one window.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.window_len {
            0
        } else {
            (n_samples - self.window_len) / self.hop + 1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            f_min_hz: 0.0,
            f_max_hz: DEFAULT_SAMPLE_RATE as f64 / 2.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::InvalidConfig("n_mels must be >= 1".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.f_min_hz >= 0.0 && self.f_min_hz < self.f_max_hz && self.f_max_hz <= nyquist) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got {}..{}",
                self.f_min_hz, self.f_max_hz
            )));
        }
        Ok(())
    }
}

/// Log-mel (or any bins × frames) grid stored row-major, one row per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramGrid {
    pub n_bins: usize,
    pub n_frames: usize,
    pub values: Vec<f64>,
    pub bin_centers_hz: Vec<f64>,
    pub frame_hop: usize,
    /// Set by [`standardize`] when the input had zero variance.
    pub degenerate: bool,
}

impl SpectrogramGrid {
    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.n_frames + frame]
    }

    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

/// Periodic L-point Hann window, `½(1 − cos(2πn/L))`.
pub fn hann_window(len: usize) -> Result<Vec<f64>> {
    if len < 2 {
        return Err(Error::InvalidConfig(format!(
            "hann window needs at least 2 points, got {len}"
        )));
    }
    Ok((0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / len as f64).cos()))
        .collect())
}

/// One-sided STFT. Outer index is the frame, inner the frequency bin.
pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<Vec<Vec<Complex64>>> {
    cfg.validate()?;
    let n_frames = cfg.frame_count(wave.samples.len());
    if n_frames == 0 {
        return Err(Error::EmptyInput(format!(
            "waveform of {} samples shorter than one {}-sample window",
            wave.samples.len(),
            cfg.window_len
        )));
    }
    let window = hann_window(cfg.window_len)?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_len);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_len];
    let n_bins = cfg.n_bins();

    let mut out = Vec::with_capacity(n_frames);
    for m in 0..n_frames {
        let start = m * cfg.hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = if n < cfg.window_len {
                Complex64::new(wave.samples[start + n] * window[n], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.push(buf[..n_bins].to_vec());
    }
    Ok(out)
}

/// `1127 · ln(1 + f/700)`.
pub fn mel_scale(f_hz: f64) -> Result<f64> {
    if !(f_hz >= 0.0) {
        return Err(Error::Domain(format!("frequency must be >= 0 Hz, got {f_hz}")));
    }
    Ok(1127.0 * (1.0 + f_hz / 700.0).ln())
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Triangular filters, centers equally spaced on the mel axis.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// Row-major `n_mels × n_bins`.
    pub weights: Vec<f64>,
    pub centers_hz: Vec<f64>,
    /// Half-open span of non-zero columns per row.
    spans: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n_bins..(i + 1) * self.n_bins]
    }

    /// Projects one power spectrum (length `n_bins`) onto the bank.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let (a, b) = self.spans[i];
            let row = self.row(i);
            *o = (a..b).map(|k| row[k] * power[k]).sum();
        }
    }
}

pub fn mel_filterbank(cfg: &MelConfig, fft_len: usize, sample_rate: u32) -> Result<MelFilterbank> {
    cfg.validate(sample_rate)?;
    let n_bins = fft_len / 2 + 1;
    let lo = mel_scale(cfg.f_min_hz)?;
    let hi = mel_scale(cfg.f_max_hz)?;
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let points: Vec<f64> = (0..cfg.n_mels + 2).map(|i| lo + step * i as f64).collect();
    let bin_mels: Vec<f64> = (0..n_bins)
        .map(|k| mel_scale(k as f64 * sample_rate as f64 / fft_len as f64))
        .collect::<Result<_>>()?;

    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    let mut spans = Vec::with_capacity(cfg.n_mels);
    for i in 0..cfg.n_mels {
        let (left, center, right) = (points[i], points[i + 1], points[i + 2]);
        let row = &mut weights[i * n_bins..(i + 1) * n_bins];
        let mut span = (usize::MAX, 0);
        for (k, &m) in bin_mels.iter().enumerate() {
            let w = if m > left && m <= center {
                (m - left) / (center - left)
            } else if m > center && m < right {
                (right - m) / (right - center)
            } else {
                0.0
            };
            if w > 0.0 {
                row[k] = w;
                span = (span.0.min(k), k + 1);
            }
        }
        if span.0 == usize::MAX {
            return Err(Error::InvalidConfig(format!(
                "mel filter {i} covers no FFT bin; too many mel bins ({}) for fft length {fft_len}",
                cfg.n_mels
            )));
        }
        spans.push(span);
    }
    Ok(MelFilterbank {
        n_mels: cfg.n_mels,
        n_bins,
        weights,
        centers_hz: points[1..=cfg.n_mels].iter().map(|&m| mel_to_hz(m)).collect(),
        spans,
    })
}

/// `ln(ε + M·|X|²)`, shape `n_mels × frames`.
pub fn log_mel_spectrogram(
    wave: &Waveform,
    stft_cfg: &StftConfig,
    mel_cfg: &MelConfig,
) -> Result<SpectrogramGrid> {
    let bank = mel_filterbank(mel_cfg, stft_cfg.fft_len, wave.sample_rate_hz)?;
    log_mel_with_bank(wave, stft_cfg, &bank)
}

/// Same as [`log_mel_spectrogram`] with a prebuilt filterbank.
pub fn log_mel_with_bank(
    wave: &Waveform,
    stft_cfg: &StftConfig,
    bank: &MelFilterbank,
) -> Result<SpectrogramGrid> {
    let spec = stft(wave, stft_cfg)?;
    if bank.n_bins != stft_cfg.n_bins() {
        return Err(Error::Shape(format!(
            "filterbank expects {} bins, stft produces {}",
            bank.n_bins,
            stft_cfg.n_bins()
        )));
    }
    let n_frames = spec.len();
    let mut values = vec![0.0; bank.n_mels * n_frames];
    let mut power = vec![0.0; bank.n_bins];
    let mut mel = vec![0.0; bank.n_mels];
    for (m, frame) in spec.iter().enumerate() {
        for (p, c) in power.iter_mut().zip(frame) {
            *p = c.norm_sqr();
        }
        bank.apply(&power, &mut mel);
        for (i, &e) in mel.iter().enumerate() {
            values[i * n_frames + m] = (LOG_FLOOR + e).ln();
        }
    }
    Ok(SpectrogramGrid {
        n_bins: bank.n_mels,
        n_frames,
        values,
        bin_centers_hz: bank.centers_hz.clone(),
        frame_hop: stft_cfg.hop,
        degenerate: false,
    })
}

/// Zero-mean, unit-variance over all cells. A constant grid maps to zeros
/// with `degenerate` set instead of dividing by zero.
pub fn standardize(grid: &SpectrogramGrid) -> Result<SpectrogramGrid> {
    if grid.values.is_empty() {
        return Err(Error::EmptyInput("cannot standardize an empty grid".into()));
    }
    let (mean, std) = grid.mean_std();
    let mut out = grid.clone();
    if std == 0.0 || !std.is_finite() {
        out.values.iter_mut().for_each(|v| *v = 0.0);
        out.degenerate = true;
    } else {
        out.values.iter_mut().for_each(|v| *v = (*v - mean) / std);
        out.degenerate = false;
    }
    Ok(out)
}

/// Energy-based silence removal.
///
/// Frames of `cfg.window_len` samples every `cfg.hop` samples are kept when
/// their energy is positive and at least `rel_threshold × max frame energy`.
/// A sample survives when any frame covering it survives (tail samples past the
/// last full frame follow that frame). Surviving runs shorter than
/// `min_segment_s` are dropped.
pub fn reclip_audio(
    wave: &Waveform,
    cfg: &StftConfig,
    rel_threshold: f64,
    min_segment_s: f64,
) -> Result<Waveform> {
    cfg.validate()?;
    let n = wave.samples.len();
    let n_frames = cfg.frame_count(n);
    if n_frames == 0 {
        return Err(Error::EmptyInput("waveform shorter than one frame".into()));
    }
    let energies: Vec<f64> = (0..n_frames)
        .map(|m| {
            let s = m * cfg.hop;
            wave.samples[s..s + cfg.window_len].iter().map(|x| x * x).sum()
        })
        .collect();
    let max_e = energies.iter().cloned().fold(0.0, f64::max);
    let threshold = rel_threshold * max_e;

    let mut keep = vec![false; n];
    for (m, &e) in energies.iter().enumerate() {
        if e > 0.0 && e >= threshold {
            let s = m * cfg.hop;
            let end = if m + 1 == n_frames { n } else { s + cfg.window_len };
            keep[s..end].iter_mut().for_each(|k| *k = true);
        }
    }

    let min_len = (min_segment_s * wave.sample_rate_hz as f64).ceil() as usize;
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if !keep[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && keep[i] {
            i += 1;
        }
        if i - start >= min_len {
            out.extend_from_slice(&wave.samples[start..i]);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyOutput("reclipping removed every frame".into()));
    }
    Waveform::new(out, wave.sample_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(frame: &[f64], fft_len: usize) -> Vec<Complex64> {
        (0..fft_len / 2 + 1)
            .map(|k| {
                frame.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (n, &x)| {
                    let ang = -2.0 * PI * (n * k) as f64 / fft_len as f64;
                    acc + Complex64::new(x * ang.cos(), x * ang.sin())
                })
            })
            .collect()
    }

    fn tone(freq: f64, secs: f64, sr: u32) -> Waveform {
        let n = (secs * sr as f64) as usize;
        Waveform::new(
            (0..n).map(|i| (2.0 * PI * freq * i as f64 / sr as f64).sin()).collect(),
            sr,
        )
        .unwrap()
    }

    #[test]
    fn hann_values() {
        let w = hann_window(8).unwrap();
        assert_eq!(w[0], 0.0);
        assert!((w[4] - 1.0).abs() < 1e-15);
        // ½(1 − cos(π/2)) = 0.5
        assert!((w[2] - 0.5).abs() < 1e-15);
        assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(matches!(hann_window(1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn default_hop_is_floor_of_rate_ratio() {
        assert_eq!(StftConfig::default().hop, 533);
    }

    #[test]
    fn stft_constant_signal() {
        let cfg = StftConfig { window_len: 16, hop: 4, fft_len: 16 };
        let wave = Waveform::new(vec![1.0; 40], 16000).unwrap();
        let spec = stft(&wave, &cfg).unwrap();
        assert_eq!(spec.len(), (40 - 16) / 4 + 1);
        let wsum: f64 = hann_window(16).unwrap().iter().sum();
        for frame in &spec {
            assert!((frame[0].norm() - wsum).abs() < 1e-12);
            for c in &frame[2..] {
                assert!(c.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn stft_matches_naive_dft() {
        let cfg = StftConfig { window_len: 24, hop: 7, fft_len: 32 };
        let samples: Vec<f64> = (0..100).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let wave = Waveform::new(samples.clone(), 8000).unwrap();
        let spec = stft(&wave, &cfg).unwrap();
        let w = hann_window(24).unwrap();
        for (m, frame) in spec.iter().enumerate() {
            let x: Vec<f64> = (0..24).map(|n| samples[m * 7 + n] * w[n]).collect();
            for (a, b) in frame.iter().zip(naive_dft(&x, 32)) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn sine_energy_concentrates_at_bin() {
        let cfg = StftConfig { window_len: 256, hop: 128, fft_len: 256 };
        let k0 = 20;
        let wave = tone(k0 as f64 * 16000.0 / 256.0, 0.1, 16000);
        for frame in stft(&wave, &cfg).unwrap() {
            let total: f64 = frame.iter().map(|c| c.norm_sqr()).sum();
            let near: f64 = frame[k0 - 1..=k0 + 1].iter().map(|c| c.norm_sqr()).sum();
            assert!(near / total >= 0.95);
        }
    }

    #[test]
    fn parseval_convention() {
        // Unnormalized forward DFT: Σ_k |X[k]|² over all N bins = N · Σ_n |x_w[n]|².
        // One-sided storage: interior bins count twice.
        let cfg = StftConfig { window_len: 64, hop: 64, fft_len: 64 };
        let samples: Vec<f64> = (0..64).map(|i| ((i * 13 % 7) as f64).sin()).collect();
        let wave = Waveform::new(samples.clone(), 16000).unwrap();
        let frame = &stft(&wave, &cfg).unwrap()[0];
        let w = hann_window(64).unwrap();
        let energy: f64 = samples.iter().zip(&w).map(|(x, w)| (x * w).powi(2)).sum();
        let spectral: f64 = frame
            .iter()
            .enumerate()
            .map(|(k, c)| if k == 0 || k == 32 { c.norm_sqr() } else { 2.0 * c.norm_sqr() })
            .sum();
        assert!((spectral - 64.0 * energy).abs() / (64.0 * energy) < 1e-9);
    }

    #[test]
    fn short_waveform_is_empty_input() {
        let wave = Waveform::new(vec![0.0; 10], 16000).unwrap();
        assert!(matches!(stft(&wave, &StftConfig::default()), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn mel_scale_points() {
        assert_eq!(mel_scale(0.0).unwrap(), 0.0);
        assert!((mel_scale(700.0).unwrap() - 1127.0 * 2f64.ln()).abs() < 1e-9);
        assert!((mel_scale(700.0).unwrap() - 781.17).abs() < 0.01);
        assert!((mel_scale(1000.0).unwrap() - 1000.0).abs() < 0.1);
        assert!(matches!(mel_scale(-1.0), Err(Error::Domain(_))));
        assert!((mel_to_hz(mel_scale(1234.5).unwrap()) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn single_filter_bank() {
        let cfg = MelConfig { n_mels: 1, f_min_hz: 0.0, f_max_hz: 8000.0 };
        let bank = mel_filterbank(&cfg, 1024, 16000).unwrap();
        let mid = mel_to_hz(mel_scale(8000.0).unwrap() / 2.0);
        assert!((bank.centers_hz[0] - mid).abs() < 1e-9);
        let row = bank.row(0);
        let peak = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!((peak as f64 * 16000.0 / 1024.0 - mid).abs() < 16000.0 / 1024.0);
        assert_eq!(row[0], 0.0);
    }

    #[test]
    fn default_bank_rows() {
        let bank = mel_filterbank(&MelConfig::default(), 1024, 16000).unwrap();
        assert_eq!(bank.n_mels, 80);
        for i in 0..80 {
            let row = bank.row(i);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
        }
        assert!(bank.centers_hz.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn too_many_mels_rejected() {
        let cfg = MelConfig { n_mels: 200, f_min_hz: 0.0, f_max_hz: 8000.0 };
        assert!(matches!(mel_filterbank(&cfg, 64, 16000), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn log_mel_silence_and_scaling() {
        let cfg = StftConfig { window_len: 256, hop: 128, fft_len: 256 };
        let mel = MelConfig { n_mels: 16, f_min_hz: 0.0, f_max_hz: 8000.0 };
        let silent = Waveform::new(vec![0.0; 2048], 16000).unwrap();
        let grid = log_mel_spectrogram(&silent, &cfg, &mel).unwrap();
        assert_eq!(grid.n_frames, cfg.frame_count(2048));
        assert!(grid.values.iter().all(|&v| v == LOG_FLOOR.ln()));

        let wave = tone(1500.0, 0.2, 16000);
        let scaled = Waveform::new(wave.samples.iter().map(|x| 3.0 * x).collect(), 16000).unwrap();
        let a = log_mel_spectrogram(&wave, &cfg, &mel).unwrap();
        let b = log_mel_spectrogram(&scaled, &cfg, &mel).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            if *x > LOG_FLOOR.ln() + 20.0 {
                assert!((y - x - 2.0 * 3f64.ln()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn standardize_cases() {
        let grid = SpectrogramGrid {
            n_bins: 2,
            n_frames: 2,
            values: vec![1.0, 3.0, 5.0, 7.0],
            bin_centers_hz: vec![0.0, 1.0],
            frame_hop: 1,
            degenerate: false,
        };
        let s = standardize(&grid).unwrap();
        let (m, sd) = s.mean_std();
        assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
        let twice = standardize(&s).unwrap();
        for (a, b) in s.values.iter().zip(&twice.values) {
            assert!((a - b).abs() < 1e-9);
        }

        let flat = SpectrogramGrid { values: vec![4.0; 4], ..grid };
        let z = standardize(&flat).unwrap();
        assert!(z.degenerate);
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reclip_behaviour() {
        let cfg = StftConfig { window_len: 256, hop: 128, fft_len: 256 };
        let t = tone(440.0, 1.0, 16000);
        let same = reclip_audio(&t, &cfg, 1e-4, 0.0).unwrap();
        assert_eq!(same.samples, t.samples);

        let silent = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        assert!(matches!(reclip_audio(&silent, &cfg, 1e-4, 0.0), Err(Error::EmptyOutput(_))));

        let mut half = t.samples.clone();
        half.extend(std::iter::repeat_n(0.0, 16000));
        let half = Waveform::new(half, 16000).unwrap();
        let out = reclip_audio(&half, &cfg, 1e-4, 0.0).unwrap();
        assert!(out.samples.len() <= half.samples.len());
        assert!((out.duration_s() - 1.0).abs() <= 256.0 / 16000.0);
    }
}
