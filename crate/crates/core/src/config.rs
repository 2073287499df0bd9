//! Flat `key = value` configuration covering model, preprocessing and training.
//!
//! Unknown keys are rejected. Blank lines and `#` comments are ignored. The
//! hash covers every key outside `train.*`, so it changes whenever parameter
//! shapes or input features would.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::corpus::PrepConfig;
use crate::error::{Error, Result};
use crate::model::{BranchConfig, ModelConfig};
use crate::sampling::SamplerMode;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub prep: PrepConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: expected true/false, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn branch_entries(name: &str, b: &BranchConfig, out: &mut Vec<(String, String)>) {
    out.push((format!("{name}.channels"), join(&b.channels)));
    out.push((format!("{name}.kernel"), b.kernel.to_string()));
    out.push((format!("{name}.stride"), b.stride.to_string()));
    out.push((format!("{name}.pool"), b.pool.to_string()));
    out.push((format!("{name}.hidden"), b.hidden.to_string()));
}

fn set_branch(b: &mut BranchConfig, field: &str, key: &str, value: &str) -> Result<()> {
    match field {
        "channels" => b.channels = parse_list(key, value)?,
        "kernel" => b.kernel = parse(key, value)?,
        "stride" => b.stride = parse(key, value)?,
        "pool" => b.pool = parse(key, value)?,
        "hidden" => b.hidden = parse(key, value)?,
        _ => return Err(Error::InvalidConfig(format!("unknown key {key}"))),
    }
    Ok(())
}

impl Config {
    /// Small widths and strided front-ends that train on a laptop CPU in
    /// minutes; the defaults elsewhere follow the full-size architecture.
    pub fn compact() -> Self {
        let branch = |channels: usize, kernel: usize, stride: usize, pool: usize| BranchConfig {
            channels: vec![channels],
            kernel,
            stride,
            pool,
            hidden: 8,
        };
        let mut cfg = Config::default();
        cfg.model.d = 16;
        cfg.model.audio = branch(8, 4, 4, 4);
        cfg.model.visual = branch(4, 4, 4, 4);
        cfg.model.text = branch(8, 3, 1, 2);
        cfg.train.batch_size = 8;
        cfg.train.lr = 0.05;
        cfg.train.momentum = 0.9;
        cfg
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let c = &self.prep.clip;
        let t = &self.train;
        let mut out: Vec<(String, String)> = vec![
            ("model.modality".into(), m.modality.to_string()),
            ("model.fusion".into(), m.fusion.to_string()),
            ("model.d".into(), m.d.to_string()),
        ];
        branch_entries("audio", &m.audio, &mut out);
        branch_entries("visual", &m.visual, &mut out);
        branch_entries("text", &m.text, &mut out);
        let rest: [(&str, String); 27] = [
            ("musdl.classes", m.musdl.classes.to_string()),
            ("musdl.expanded", m.musdl.expanded.to_string()),
            ("musdl.sigma", m.musdl.sigma.to_string()),
            ("mel.n_mels", c.mel.n_mels.to_string()),
            ("mel.f_min_hz", c.mel.f_min_hz.to_string()),
            ("mel.f_max_hz", c.mel.f_max_hz.to_string()),
            ("stft.window_len", c.stft.window_len.to_string()),
            ("stft.hop", c.stft.hop.to_string()),
            ("stft.fft_len", c.stft.fft_len.to_string()),
            ("clip.window_s", c.window_s.to_string()),
            ("clip.overlap_s", c.overlap_s.to_string()),
            ("clip.visual_fps", c.visual_fps.to_string()),
            ("clip.max_sentences", c.max_sentences.to_string()),
            ("prep.audio_reclip", self.prep.audio_reclip.to_string()),
            ("prep.reclip_threshold", self.prep.reclip_threshold.to_string()),
            ("prep.reclip_min_segment_s", self.prep.reclip_min_segment_s.to_string()),
            ("prep.visual_crop", self.prep.visual_crop.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.sam_rho", t.sam_rho.to_string()),
            ("train.class_weighting", t.class_weighting.to_string()),
            ("train.sampler", t.sampler.map(|s| s.to_string()).unwrap_or_else(|| "none".into())),
            ("train.gender_balance", t.gender_balance.to_string()),
            ("train.seed", t.seed.to_string()),
            (
                "train.target_accuracy",
                t.target_accuracy.map(|v| v.to_string()).unwrap_or_else(|| "none".into()),
            ),
        ];
        out.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::InvalidConfig(format!("unknown key {key}")))?;
        let m = &mut self.model;
        let c = &mut self.prep.clip;
        let t = &mut self.train;
        match (section, field) {
            ("model", "modality") => m.modality = value.parse()?,
            ("model", "fusion") => m.fusion = value.parse()?,
            ("model", "d") => m.d = parse(key, value)?,
            ("audio", f) => set_branch(&mut m.audio, f, key, value)?,
            ("visual", f) => set_branch(&mut m.visual, f, key, value)?,
            ("text", f) => set_branch(&mut m.text, f, key, value)?,
            ("musdl", "classes") => m.musdl.classes = parse(key, value)?,
            ("musdl", "expanded") => m.musdl.expanded = parse(key, value)?,
            ("musdl", "sigma") => m.musdl.sigma = parse(key, value)?,
            ("mel", "n_mels") => {
                c.mel.n_mels = parse(key, value)?;
                m.n_mels = c.mel.n_mels;
            }
            ("mel", "f_min_hz") => c.mel.f_min_hz = parse(key, value)?,
            ("mel", "f_max_hz") => c.mel.f_max_hz = parse(key, value)?,
            ("stft", "window_len") => c.stft.window_len = parse(key, value)?,
            ("stft", "hop") => c.stft.hop = parse(key, value)?,
            ("stft", "fft_len") => c.stft.fft_len = parse(key, value)?,
            ("clip", "window_s") => c.window_s = parse(key, value)?,
            ("clip", "overlap_s") => c.overlap_s = parse(key, value)?,
            ("clip", "visual_fps") => c.visual_fps = parse(key, value)?,
            ("clip", "max_sentences") => c.max_sentences = parse(key, value)?,
            ("prep", "audio_reclip") => self.prep.audio_reclip = parse_bool(key, value)?,
            ("prep", "reclip_threshold") => self.prep.reclip_threshold = parse(key, value)?,
            ("prep", "reclip_min_segment_s") => self.prep.reclip_min_segment_s = parse(key, value)?,
            ("prep", "visual_crop") => self.prep.visual_crop = parse_bool(key, value)?,
            ("train", "epochs") => t.epochs = parse(key, value)?,
            ("train", "batch_size") => t.batch_size = parse(key, value)?,
            ("train", "lr") => t.lr = parse(key, value)?,
            ("train", "momentum") => t.momentum = parse(key, value)?,
            ("train", "sam_rho") => t.sam_rho = parse(key, value)?,
            ("train", "class_weighting") => t.class_weighting = parse_bool(key, value)?,
            ("train", "sampler") => {
                t.sampler = match value {
                    "none" => None,
                    v => Some(v.parse::<SamplerMode>()?),
                }
            }
            ("train", "gender_balance") => t.gender_balance = parse_bool(key, value)?,
            ("train", "seed") => t.seed = parse(key, value)?,
            ("train", "target_accuracy") => {
                t.target_accuracy = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => return Err(Error::InvalidConfig(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prep.clip.validate()?;
        self.prep.clip.mel.validate(crate::signal::DEFAULT_SAMPLE_RATE)?;
        self.train.validate()
    }

    /// Defaults overlaid with the given text.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::InvalidConfig(m) => Error::InvalidConfig(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    /// Overlays the keys set in a config file.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical text: every key, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !k.starts_with("train.") {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::default();
        cfg.set("audio.channels", "4,8").unwrap();
        cfg.set("train.sampler", "none").unwrap();
        cfg.set("train.target_accuracy", "0.9").unwrap();
        cfg.set("mel.n_mels", "40").unwrap();
        let back = Config::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.model.n_mels, 40);
    }

    #[test]
    fn errors() {
        assert!(matches!(Config::parse_text("bogus.key = 1"), Err(Error::InvalidConfig(_))));
        assert!(matches!(Config::parse_text("model.d = x"), Err(Error::InvalidConfig(_))));
        assert!(matches!(Config::parse_text("model.d"), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn hash_ignores_training_keys() {
        let a = Config::default();
        let mut b = a.clone();
        b.set("train.lr", "0.5").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("model.d", "8").unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
