//! Multi-branch ConvBiLSTM with late fusion and eight subscore heads.
//!
//! Each branch: `[conv → BN → ReLU → max-pool]+ → BiLSTM → FC(d)`. The branch
//! features are stacked into a `[B, 1, n, d]` map, fused, and fed to eight
//! `FC → softmax` heads over the expanded MUSDL grid.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{ClipSample, EMBED_DIM, FRAME_ROWS};
use crate::fusion::{self, AttentionFusion, FusionMethod, N_HEADS};
use crate::musdl::{self, MusdlConfig};
use crate::nn::{BatchNormLayer, BiLstmLayer, Conv1dLayer, Conv2dLayer, Graph, LinearLayer, Mode, ParamStore, Tensor, Var};
use crate::phq::{self, BINARY_THRESHOLD};
use crate::sam::Sam;
use crate::sampling::dynamic_class_weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    Audio,
    Visual,
    Text,
}

impl Branch {
    pub fn key(&self) -> &'static str {
        match self {
            Branch::Audio => "audio",
            Branch::Visual => "visual",
            Branch::Text => "text",
        }
    }

    /// Prefix shared by every tensor of this branch in a [`ParamStore`].
    pub fn prefix(&self) -> String {
        format!("{}.", self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    A,
    V,
    T,
    AV,
    AVT,
}

impl Modality {
    pub fn branches(&self) -> &'static [Branch] {
        match self {
            Modality::A => &[Branch::Audio],
            Modality::V => &[Branch::Visual],
            Modality::T => &[Branch::Text],
            Modality::AV => &[Branch::Audio, Branch::Visual],
            Modality::AVT => &[Branch::Audio, Branch::Visual, Branch::Text],
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            Modality::A => "a",
            Modality::V => "v",
            Modality::T => "t",
            Modality::AV => "av",
            Modality::AVT => "avt",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "a" => Modality::A,
            "v" => Modality::V,
            "t" => Modality::T,
            "av" => Modality::AV,
            "avt" => Modality::AVT,
            other => return Err(Error::InvalidConfig(format!("unknown modality {other:?}"))),
        })
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchConfig {
    /// Output channels of each conv stage.
    pub channels: Vec<usize>,
    /// Temporal kernel width.
    pub kernel: usize,
    pub stride: usize,
    /// Max-pool size after each stage; 1 disables pooling.
    pub pool: usize,
    pub hidden: usize,
}

impl BranchConfig {
    fn validate(&self, branch: Branch) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidConfig(format!("{}: need at least one non-zero conv width", branch.key())));
        }
        if self.kernel == 0 || self.stride == 0 || self.pool == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig(format!(
                "{}: kernel, stride, pool and hidden must be positive",
                branch.key()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub modality: Modality,
    pub fusion: FusionMethod,
    /// Feature size every branch projects to.
    pub d: usize,
    pub n_mels: usize,
    pub audio: BranchConfig,
    pub visual: BranchConfig,
    pub text: BranchConfig,
    pub musdl: MusdlConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modality: Modality::AVT,
            fusion: FusionMethod::SubAttention,
            d: 256,
            n_mels: 80,
            audio: BranchConfig {
                channels: vec![32, 64],
                kernel: 3,
                stride: 1,
                pool: 2,
                hidden: 128,
            },
            visual: BranchConfig {
                channels: vec![64],
                kernel: 3,
                stride: 1,
                pool: 2,
                hidden: 128,
            },
            text: BranchConfig {
                channels: vec![64],
                kernel: 3,
                stride: 1,
                pool: 2,
                hidden: 128,
            },
            musdl: MusdlConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn branch(&self, b: Branch) -> &BranchConfig {
        match b {
            Branch::Audio => &self.audio,
            Branch::Visual => &self.visual,
            Branch::Text => &self.text,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_mels == 0 {
            return Err(Error::InvalidConfig("d and n_mels must be positive".into()));
        }
        for &b in self.modality.branches() {
            self.branch(b).validate(b)?;
        }
        self.musdl.validate()?;
        if self.musdl.n_subscores != N_HEADS {
            return Err(Error::InvalidConfig(format!("model has {N_HEADS} heads, musdl config says {}", self.musdl.n_subscores)));
        }
        Ok(())
    }

    fn n_modalities(&self) -> usize {
        self.modality.branches().len()
    }

    /// Fusion is skipped for a single modality.
    fn fuses(&self) -> bool {
        self.n_modalities() > 1
    }

    pub fn head_input_dim(&self) -> usize {
        let n = self.n_modalities();
        if !self.fuses() {
            return self.d;
        }
        match self.fusion {
            FusionMethod::Concatenation | FusionMethod::Attention | FusionMethod::SubAttention => n * self.d,
            _ => self.d,
        }
    }
}

/// Converts a batched modality tensor from its clip layout (audio
/// `[B, n_mels, T]`, visual `[B, T, 72, 3]`, text `[B, S, 512]`) to the
/// channel-first layout the convolutions consume (audio unchanged, visual
/// `[B, 3, 72, T]`, text `[B, 512, S]`).
pub fn channel_first(b: Branch, input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    match b {
        Branch::Audio if s.len() == 3 => Ok(input.clone()),
        Branch::Visual if s.len() == 4 && s[2] == FRAME_ROWS && s[3] == 3 => input.permute(&[0, 3, 2, 1]),
        Branch::Text if s.len() == 3 && s[2] == EMBED_DIM => input.permute(&[0, 2, 1]),
        _ => Err(Error::Shape(format!("{} input has unexpected shape {s:?}", b.key()))),
    }
}

/// One clip's modalities in channel-first layout, converted once and reused
/// across epochs.
#[derive(Debug, Clone)]
pub struct ClipInputs {
    pub audio: Option<Tensor>,
    pub visual: Option<Tensor>,
    pub text: Option<Tensor>,
    pub subscores: [u8; 8],
}

impl ClipInputs {
    pub fn new(clip: &ClipSample, modality: Modality) -> Result<Self> {
        let conv = |b: Branch, t: &Tensor| -> Result<Option<Tensor>> {
            if !modality.branches().contains(&b) {
                return Ok(None);
            }
            let batched = t.clone().reshape(&[[1].as_slice(), t.shape()].concat())?;
            let cf = channel_first(b, &batched)?;
            let shape = cf.shape()[1..].to_vec();
            Ok(Some(cf.reshape(&shape)?))
        };
        Ok(Self {
            audio: conv(Branch::Audio, &clip.audio)?,
            visual: conv(Branch::Visual, &clip.visual)?,
            text: conv(Branch::Text, &clip.text)?,
            subscores: clip.subscores,
        })
    }
}

pub fn prepare_inputs(clips: &[ClipSample], modality: Modality) -> Result<Vec<ClipInputs>> {
    clips.iter().map(|c| ClipInputs::new(c, modality)).collect()
}

/// Stacked channel-first modality tensors for a batch of clips.
#[derive(Debug, Clone)]
pub struct Batch {
    pub audio: Option<Tensor>,
    pub visual: Option<Tensor>,
    pub text: Option<Tensor>,
    pub subscores: Vec<[u8; 8]>,
}

fn stack(parts: impl Iterator<Item = Tensor>) -> Result<Tensor> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    let mut n = 0;
    for t in parts {
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) if s.as_slice() != t.shape() => {
                return Err(Error::Shape(format!("cannot batch {:?} with {s:?}", t.shape())))
            }
            _ => {}
        }
        data.extend_from_slice(t.data());
        n += 1;
    }
    let shape = shape.ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
    Tensor::new([vec![n], shape].concat(), data)
}

impl Batch {
    pub fn from_inputs(inputs: &[&ClipInputs]) -> Result<Self> {
        let first = inputs.first().ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
        let gather = |f: fn(&ClipInputs) -> Option<&Tensor>| -> Result<Option<Tensor>> {
            if f(first).is_none() {
                return Ok(None);
            }
            let parts = inputs
                .iter()
                .map(|c| f(c).cloned().ok_or_else(|| Error::Shape("clips in a batch carry different modalities".into())))
                .collect::<Result<Vec<_>>>()?;
            stack(parts.into_iter()).map(Some)
        };
        Ok(Self {
            audio: gather(|c| c.audio.as_ref())?,
            visual: gather(|c| c.visual.as_ref())?,
            text: gather(|c| c.text.as_ref())?,
            subscores: inputs.iter().map(|c| c.subscores).collect(),
        })
    }

    pub fn from_clips(clips: &[&ClipSample], modality: Modality) -> Result<Self> {
        let inputs = clips
            .iter()
            .map(|c| ClipInputs::new(c, modality))
            .collect::<Result<Vec<_>>>()?;
        Self::from_inputs(&inputs.iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.subscores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subscores.is_empty()
    }

    fn get(&self, b: Branch) -> Option<&Tensor> {
        match b {
            Branch::Audio => self.audio.as_ref(),
            Branch::Visual => self.visual.as_ref(),
            Branch::Text => self.text.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelForward {
    /// One `[B, d]` feature per branch, in modality order.
    pub features: [Option<Var>; 3],
    /// `[B, 8, m']` head distributions.
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn conv1d(&self, b: Branch, i: usize, c_in: usize) -> Conv1dLayer {
        let bc = self.cfg.branch(b);
        Conv1dLayer {
            name: format!("{}.conv{i}", b.key()),
            c_in,
            c_out: bc.channels[i],
            kernel: bc.kernel,
            stride: bc.stride,
            pad: bc.kernel / 2,
        }
    }

    fn visual_conv(&self) -> Conv2dLayer {
        let bc = &self.cfg.visual;
        Conv2dLayer {
            name: "visual.conv0".into(),
            c_in: 3,
            c_out: bc.channels[0],
            kernel: (FRAME_ROWS, bc.kernel),
            stride: (1, bc.stride),
            pad: (0, bc.kernel / 2),
        }
    }

    fn bn(b: Branch, i: usize, channels: usize) -> BatchNormLayer {
        BatchNormLayer {
            name: format!("{}.bn{i}", b.key()),
            channels,
        }
    }

    fn lstm(&self, b: Branch) -> BiLstmLayer {
        let bc = self.cfg.branch(b);
        BiLstmLayer {
            name: format!("{}.lstm", b.key()),
            d_in: *bc.channels.last().unwrap(),
            hidden: bc.hidden,
        }
    }

    fn fc(&self, b: Branch) -> LinearLayer {
        LinearLayer {
            name: format!("{}.fc", b.key()),
            d_in: 2 * self.cfg.branch(b).hidden,
            d_out: self.cfg.d,
        }
    }

    fn in_channels(&self, b: Branch) -> usize {
        match b {
            Branch::Audio => self.cfg.n_mels,
            Branch::Visual => 3,
            Branch::Text => EMBED_DIM,
        }
    }

    pub fn fusion_blocks(&self) -> Vec<AttentionFusion> {
        if !self.cfg.fuses() {
            return Vec::new();
        }
        match self.cfg.fusion {
            FusionMethod::Attention => vec![AttentionFusion::new("fusion")],
            FusionMethod::SubAttention => (0..N_HEADS).map(|k| AttentionFusion::new(format!("fusion{k}"))).collect(),
            _ => Vec::new(),
        }
    }

    pub fn head(&self, k: usize) -> LinearLayer {
        LinearLayer {
            name: format!("head{k}"),
            d_in: self.cfg.head_input_dim(),
            d_out: self.cfg.musdl.expanded,
        }
    }

    /// Fresh parameters, f32-representable.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for &b in self.cfg.modality.branches() {
            let bc = self.cfg.branch(b);
            for (i, &c) in bc.channels.iter().enumerate() {
                if b == Branch::Visual && i == 0 {
                    self.visual_conv().init(&mut store, &mut rng);
                } else {
                    let c_in = if i == 0 { self.in_channels(b) } else { bc.channels[i - 1] };
                    self.conv1d(b, i, c_in).init(&mut store, &mut rng);
                }
                Self::bn(b, i, c).init(&mut store);
            }
            self.lstm(b).init(&mut store, &mut rng);
            self.fc(b).init(&mut store, &mut rng);
        }
        for block in self.fusion_blocks() {
            block.init(&mut store, &mut rng);
        }
        for k in 0..N_HEADS {
            self.head(k).init(&mut store, &mut rng);
        }
        store.round_to_f32();
        store
    }

    /// Modality tensor in clip layout → `[B, d]` feature.
    pub fn forward_branch(&self, g: &mut Graph, store: &ParamStore, b: Branch, input: &Tensor) -> Result<Var> {
        self.forward_branch_cf(g, store, b, &channel_first(b, input)?)
    }

    /// Same as [`Model::forward_branch`] on an input already in channel-first layout.
    pub fn forward_branch_cf(&self, g: &mut Graph, store: &ParamStore, b: Branch, input: &Tensor) -> Result<Var> {
        let bc = self.cfg.branch(b);
        let s = input.shape();
        let ok = match b {
            Branch::Audio => s.len() == 3 && s[1] == self.cfg.n_mels,
            Branch::Visual => s.len() == 4 && s[1] == 3 && s[2] == FRAME_ROWS,
            Branch::Text => s.len() == 3 && s[1] == EMBED_DIM,
        };
        if !ok {
            return Err(Error::Shape(format!("{} input has unexpected shape {s:?}", b.key())));
        }
        let mut h = g.input(input.clone())?;
        for (i, &c) in bc.channels.iter().enumerate() {
            h = if b == Branch::Visual && i == 0 {
                let y = self.visual_conv().forward(g, store, h)?;
                let ys = g.shape(y).to_vec();
                g.reshape(y, &[ys[0], ys[1], ys[3]])?
            } else {
                let c_in = if i == 0 { self.in_channels(b) } else { bc.channels[i - 1] };
                self.conv1d(b, i, c_in).forward(g, store, h)?
            };
            h = Self::bn(b, i, c).forward(g, store, h)?;
            h = g.relu(h)?;
            if bc.pool > 1 {
                h = g.max_pool1d(h, bc.pool)?;
            }
        }
        let seq = g.permute(h, &[0, 2, 1])?;
        let lstm = self.lstm(b);
        let out = lstm.forward(g, store, seq)?;
        let summary = lstm.summary(g, out)?;
        self.fc(b).forward(g, store, summary)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<ModelForward> {
        let mut features = [None; 3];
        let mut feats = Vec::new();
        for &b in self.cfg.modality.branches() {
            let input = batch
                .get(b)
                .ok_or_else(|| Error::Shape(format!("batch lacks the {} modality", b.key())))?;
            let f = self.forward_branch_cf(g, store, b, input)?;
            features[b as usize] = Some(f);
            feats.push(f);
        }
        let bsz = batch.len();
        let n = feats.len();
        let d = self.cfg.d;
        let head_inputs: Vec<Var> = if !self.cfg.fuses() {
            vec![feats[0]; N_HEADS]
        } else if self.cfg.fusion.is_attentional() {
            let flat = g.concat(&feats, 1)?;
            let map = g.reshape(flat, &[bsz, 1, n, d])?;
            let blocks = self.fusion_blocks();
            let fused = if self.cfg.fusion == FusionMethod::SubAttention {
                fusion::sub_attentional_bank(g, store, &blocks, map)?
            } else {
                vec![blocks[0].forward(g, store, map)?.output; N_HEADS]
            };
            fused
                .into_iter()
                .map(|v| g.reshape(v, &[bsz, n * d]))
                .collect::<Result<_>>()?
        } else {
            vec![fusion::baseline_fuse_graph(g, self.cfg.fusion, &feats)?; N_HEADS]
        };
        let m = self.cfg.musdl.expanded;
        let mut logits = Vec::with_capacity(N_HEADS);
        for (k, &inp) in head_inputs.iter().enumerate() {
            let z = self.head(k).forward(g, store, inp)?;
            logits.push(g.reshape(z, &[bsz, 1, m])?);
        }
        let stacked = g.concat(&logits, 1)?;
        let probs = g.softmax(stacked)?;
        Ok(ModelForward { features, probs })
    }

    /// `(1/B) Σ_i Σ_k w_ik · KL(t_ik ‖ p_ik)`.
    pub fn loss(&self, g: &mut Graph, probs: Var, subscores: &[[u8; 8]], class_weighting: bool) -> Result<Var> {
        let hard: Vec<usize> = subscores.iter().flat_map(|s| s.iter().map(|&v| v as usize)).collect();
        let soft = musdl::transform_labels(&hard, &self.cfg.musdl)?;
        let target = Tensor::new(vec![subscores.len(), N_HEADS, self.cfg.musdl.expanded], soft.values)?;
        let weights = if class_weighting {
            dynamic_class_weights(subscores, self.cfg.musdl.classes)?
        } else {
            vec![1.0; hard.len()]
        };
        g.kl_div(&target, probs, &weights, 1.0 / subscores.len() as f64)
    }

    /// Decoded subscores for every sample of a `[B, 8, m']` prediction.
    pub fn decode(&self, probs: &Tensor) -> Result<Vec<[u8; 8]>> {
        let per_sample = N_HEADS * self.cfg.musdl.expanded;
        probs
            .data()
            .chunks(per_sample)
            .map(|row| {
                let d = musdl::decode_prediction(row, &self.cfg.musdl)?;
                Ok(std::array::from_fn(|k| d[k] as u8))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub subscores: [u8; 8],
    /// Row-major `8 × m'`.
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn record(&self) -> Result<phq::PhqRecord> {
        phq::derive_phq(&self.subscores)
    }
}

fn is_binary(s: &[u8; 8]) -> bool {
    s.iter().map(|&v| v as u32).sum::<u32>() >= BINARY_THRESHOLD
}

/// Inference in eval mode (running BN statistics).
pub fn predict(model: &Model, store: &ParamStore, inputs: &[ClipInputs], batch_size: usize) -> Result<Vec<Prediction>> {
    let per_sample = N_HEADS * model.cfg.musdl.expanded;
    let mut out = Vec::with_capacity(inputs.len());
    let refs: Vec<&ClipInputs> = inputs.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch = Batch::from_inputs(chunk)?;
        let mut g = Graph::new(Mode::Eval);
        let fwd = model.forward(&mut g, store, &batch)?;
        let probs = g.value(fwd.probs);
        for (row, subscores) in probs.data().chunks(per_sample).zip(model.decode(probs)?) {
            out.push(Prediction {
                subscores,
                probs: row.to_vec(),
            });
        }
    }
    Ok(out)
}

/// [`predict`] straight from clips.
pub fn predict_clips(model: &Model, store: &ParamStore, clips: &[ClipSample], batch_size: usize) -> Result<Vec<Prediction>> {
    predict(model, store, &prepare_inputs(clips, model.cfg.modality)?, batch_size)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipAccuracy {
    /// Binary agreement of the decoded total score.
    pub binary: f64,
    pub subscore: [f64; 8],
}

pub fn clip_accuracy(preds: &[[u8; 8]], truths: &[[u8; 8]]) -> ClipAccuracy {
    let n = preds.len().max(1) as f64;
    let binary = preds.iter().zip(truths).filter(|(p, t)| is_binary(p) == is_binary(t)).count() as f64 / n;
    let subscore = std::array::from_fn(|k| preds.iter().zip(truths).filter(|(p, t)| p[k] == t[k]).count() as f64 / n);
    ClipAccuracy { binary, subscore }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    /// Measured on the training-mode forward pass of each batch.
    pub accuracy: ClipAccuracy,
    pub evaluations: usize,
}

/// One pass over `order` (clip indices, already sampled/shuffled) in batches.
/// BN running statistics are updated from the unperturbed pass only.
pub fn train_epoch(
    model: &Model,
    store: &mut ParamStore,
    sam: &mut Sam,
    inputs: &[ClipInputs],
    order: &[usize],
    batch_size: usize,
    class_weighting: bool,
) -> Result<EpochStats> {
    if order.is_empty() {
        return Err(Error::EmptyInput("no clips to train on".into()));
    }
    let mut loss_sum = 0.0;
    let mut preds = Vec::with_capacity(order.len());
    let mut truths = Vec::with_capacity(order.len());
    let evals_before = sam.evaluations();
    for chunk in order.chunks(batch_size.max(1)) {
        let refs: Vec<&ClipInputs> = chunk
            .iter()
            .map(|&i| inputs.get(i).ok_or_else(|| Error::Shape(format!("clip index {i} out of range"))))
            .collect::<Result<_>>()?;
        let batch = Batch::from_inputs(&refs)?;
        let mut first: Option<(Vec<crate::nn::BnUpdate>, Tensor)> = None;
        let step = sam.step(store, |p| {
            let mut g = Graph::new(Mode::Train);
            let fwd = model.forward(&mut g, p, &batch)?;
            let loss = model.loss(&mut g, fwd.probs, &batch.subscores, class_weighting)?;
            g.backward(loss)?;
            if first.is_none() {
                first = Some((g.bn_updates().to_vec(), g.value(fwd.probs).clone()));
            }
            Ok((g.value(loss).data()[0], g.param_grads()))
        })?;
        let (updates, probs) = first.expect("loss evaluated at least once");
        store.apply_bn_updates(&updates)?;
        store.round_to_f32();
        loss_sum += step.loss * batch.len() as f64;
        preds.extend(model.decode(&probs)?);
        truths.extend(batch.subscores.iter().copied());
    }
    Ok(EpochStats {
        mean_loss: loss_sum / order.len() as f64,
        accuracy: clip_accuracy(&preds, &truths),
        evaluations: sam.evaluations() - evals_before,
    })
}
