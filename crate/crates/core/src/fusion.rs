//! Late-fusion operators over per-modality feature vectors.
//!
//! The attentional block works on a single-channel map `Y [B, 1, n, d]`
//! (n modalities stacked as rows):
//!
//! 1. `X  = conv_first(Y) + Y`
//! 2. `w  = σ(G(X) + L(X))`, `X' = conv_y(Y)·w + Y·(1 − w)`
//! 3. `w' = σ(G(X') + L(X'))`, `Y' = conv_y(Y)·w' + Y·(1 − w')`
//!
//! `G` pools globally, then point-wise conv → BN → ReLU → point-wise conv → BN;
//! `L` is the same stack without the pooling. With one channel the reduction
//! ratio is necessarily 1, so every point-wise conv is a scalar affine map.
//! Both attention stages have their own `G`/`L` parameters; the two `conv_y`
//! uses share one kernel.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, Conv2dLayer, Graph, ParamStore, Var};

pub const N_HEADS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMethod {
    Multiplication,
    Concatenation,
    Median,
    Maximum,
    Summation,
    Mean,
    Attention,
    SubAttention,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 8] = [
        FusionMethod::Multiplication,
        FusionMethod::Concatenation,
        FusionMethod::Median,
        FusionMethod::Maximum,
        FusionMethod::Summation,
        FusionMethod::Mean,
        FusionMethod::Attention,
        FusionMethod::SubAttention,
    ];

    pub fn key(&self) -> &'static str {
        match self {
            FusionMethod::Multiplication => "mult",
            FusionMethod::Concatenation => "concat",
            FusionMethod::Median => "median",
            FusionMethod::Maximum => "max",
            FusionMethod::Summation => "sum",
            FusionMethod::Mean => "mean",
            FusionMethod::Attention => "atten",
            FusionMethod::SubAttention => "subatten",
        }
    }

    pub fn title(&self) -> &'static str {
        match self {
            FusionMethod::Multiplication => "Multiplication",
            FusionMethod::Concatenation => "Concatenation",
            FusionMethod::Median => "Median",
            FusionMethod::Maximum => "Maximum",
            FusionMethod::Summation => "Summation",
            FusionMethod::Mean => "Mean",
            FusionMethod::Attention => "Attention",
            FusionMethod::SubAttention => "Sub-attention",
        }
    }

    pub fn is_attentional(&self) -> bool {
        matches!(self, FusionMethod::Attention | FusionMethod::SubAttention)
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMethod::ALL
            .into_iter()
            .find(|m| m.key() == s.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown fusion method {s:?}")))
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Reference implementation of the six non-attentional operators on plain
/// vectors. Median over an even count takes the lower median.
pub fn baseline_fuse(method: FusionMethod, vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    if vectors.len() < 2 {
        return Err(Error::Shape(format!("need at least 2 vectors, got {}", vectors.len())));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("ragged feature dimensions".into()));
    }
    let n = vectors.len();
    let column = |j: usize| vectors.iter().map(move |v| v[j]);
    Ok(match method {
        FusionMethod::Multiplication => (0..d).map(|j| column(j).product()).collect(),
        FusionMethod::Concatenation => vectors.concat(),
        FusionMethod::Median => (0..d)
            .map(|j| {
                let mut c: Vec<f64> = column(j).collect();
                c.sort_by(f64::total_cmp);
                c[(n - 1) / 2]
            })
            .collect(),
        FusionMethod::Maximum => (0..d).map(|j| column(j).fold(f64::NEG_INFINITY, f64::max)).collect(),
        FusionMethod::Summation => (0..d).map(|j| column(j).sum()).collect(),
        FusionMethod::Mean => (0..d).map(|j| column(j).sum::<f64>() / n as f64).collect(),
        FusionMethod::Attention | FusionMethod::SubAttention => {
            return Err(Error::InvalidConfig(format!(
                "{method} is not a baseline operator"
            )))
        }
    })
}

/// Differentiable counterpart of [`baseline_fuse`] over `[B, d]` inputs.
pub fn baseline_fuse_graph(g: &mut Graph, method: FusionMethod, inputs: &[Var]) -> Result<Var> {
    if inputs.len() < 2 {
        return Err(Error::Shape(format!("need at least 2 inputs, got {}", inputs.len())));
    }
    let shape = g.shape(inputs[0]).to_vec();
    if shape.len() != 2 || inputs.iter().any(|&v| g.shape(v) != shape.as_slice()) {
        return Err(Error::Shape("baseline fusion inputs must share a [B, d] shape".into()));
    }
    let (bsz, d, n) = (shape[0], shape[1], inputs.len());
    match method {
        FusionMethod::Multiplication | FusionMethod::Summation | FusionMethod::Mean => {
            let mut acc = inputs[0];
            for &v in &inputs[1..] {
                acc = if method == FusionMethod::Multiplication {
                    g.mul(acc, v)?
                } else {
                    g.add(acc, v)?
                };
            }
            if method == FusionMethod::Mean {
                acc = g.affine(acc, 1.0 / n as f64, 0.0)?;
            }
            Ok(acc)
        }
        FusionMethod::Concatenation => g.concat(inputs, 1),
        FusionMethod::Median | FusionMethod::Maximum => {
            let stacked = g.concat(inputs, 1)?; // [B, n·d], modality-major per row
            let vals = g.value(stacked).data();
            let mut index = Vec::with_capacity(bsz * d);
            for b in 0..bsz {
                for j in 0..d {
                    let mut cands: Vec<usize> = (0..n).map(|k| b * n * d + k * d + j).collect();
                    let pick = if method == FusionMethod::Maximum {
                        *cands
                            .iter()
                            .reduce(|best, c| if vals[*c] > vals[*best] { c } else { best })
                            .unwrap()
                    } else {
                        cands.sort_by(|x, y| vals[*x].total_cmp(&vals[*y]));
                        cands[(n - 1) / 2]
                    };
                    index.push(pick);
                }
            }
            g.gather(stacked, index, &[bsz, d])
        }
        FusionMethod::Attention | FusionMethod::SubAttention => Err(Error::InvalidConfig(format!(
            "{method} is not a baseline operator"
        ))),
    }
}

/// Which attention stage's parameters to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    First,
    Second,
}

impl Stage {
    fn key(&self) -> &'static str {
        match self {
            Stage::First => "att1",
            Stage::Second => "att2",
        }
    }
}

/// Vars produced by one pass through the block, for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct FusionTrace {
    pub x: Var,
    pub w: Var,
    pub x_prime: Var,
    pub w_prime: Var,
    pub conv_y: Var,
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct AttentionFusion {
    pub name: String,
}

impl AttentionFusion {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into() }
    }

    fn conv3(&self, field: &str) -> Conv2dLayer {
        Conv2dLayer {
            name: format!("{}.{field}", self.name),
            c_in: 1,
            c_out: 1,
            kernel: (3, 3),
            stride: (1, 1),
            pad: (1, 1),
        }
    }

    fn pw(&self, stage: Stage, path: &str, idx: usize) -> Conv2dLayer {
        Conv2dLayer {
            name: format!("{}.{}.{path}.pw{idx}", self.name, stage.key()),
            c_in: 1,
            c_out: 1,
            kernel: (1, 1),
            stride: (1, 1),
            pad: (0, 0),
        }
    }

    fn bn(&self, stage: Stage, path: &str, idx: usize) -> BatchNormLayer {
        BatchNormLayer {
            name: format!("{}.{}.{path}.bn{idx}", self.name, stage.key()),
            channels: 1,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.conv3("conv_first").init(store, rng);
        self.conv3("conv_y").init(store, rng);
        for stage in [Stage::First, Stage::Second] {
            for path in ["global", "local"] {
                for idx in 1..=2 {
                    self.pw(stage, path, idx).init(store, rng);
                    self.bn(stage, path, idx).init(store);
                }
            }
        }
    }

    /// Name of the BN shift feeding the sigmoid on `path` of `stage`; tests
    /// use it to saturate the attention weight.
    pub fn final_shift_name(&self, stage: Stage, path: &str) -> String {
        format!("{}.beta", self.bn(stage, path, 2).name)
    }

    /// Every parameter name owned by this block, in store order.
    pub fn param_names(&self, store: &ParamStore) -> Vec<String> {
        let prefix = format!("{}.", self.name);
        store
            .params()
            .keys()
            .filter(|k| k.starts_with(&prefix))
            .cloned()
            .collect()
    }

    fn attention_path(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stage: Stage,
        path: &str,
        x: Var,
    ) -> Result<Var> {
        let mut h = self.pw(stage, path, 1).forward(g, store, x)?;
        h = self.bn(stage, path, 1).forward(g, store, h)?;
        h = g.relu(h)?;
        h = self.pw(stage, path, 2).forward(g, store, h)?;
        self.bn(stage, path, 2).forward(g, store, h)
    }

    /// `G(X)` as a `[B, 1, 1, 1]` map.
    pub fn global_attention(&self, g: &mut Graph, store: &ParamStore, stage: Stage, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let pooled = g.spatial_mean(x)?;
        let pooled = g.reshape(pooled, &[s[0], s[1], 1, 1])?;
        self.attention_path(g, store, stage, "global", pooled)
    }

    /// `L(X)`, same shape as `x`.
    pub fn local_attention(&self, g: &mut Graph, store: &ParamStore, stage: Stage, x: Var) -> Result<Var> {
        self.attention_path(g, store, stage, "local", x)
    }

    /// `σ(G(X) ⊕ L(X))` with `G` broadcast over the spatial axes.
    pub fn channel_attention_weight(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stage: Stage,
        x: Var,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("feature map must be [B, C, H, W], got {s:?}")));
        }
        let global = self.global_attention(g, store, stage, x)?;
        let spatial = s[2] * s[3];
        let index: Vec<usize> = (0..s[0] * s[1]).flat_map(|bc| std::iter::repeat_n(bc, spatial)).collect();
        let global = g.gather(global, index, &s)?;
        let local = self.local_attention(g, store, stage, x)?;
        let pre = g.add(global, local)?;
        g.sigmoid(pre)
    }

    /// `conv·w + y·(1 − w)`.
    fn blend(g: &mut Graph, conv: Var, y: Var, w: Var) -> Result<Var> {
        let rf = g.mul(conv, w)?;
        let comp = g.affine(w, -1.0, 1.0)?;
        let rfc = g.mul(y, comp)?;
        g.add(rf, rfc)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, y: Var) -> Result<FusionTrace> {
        let s = g.shape(y).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape(format!("fusion input must be [B, 1, n, d], got {s:?}")));
        }
        let first = self.conv3("conv_first").forward(g, store, y)?;
        let x = g.add(first, y)?;
        let conv_y = self.conv3("conv_y").forward(g, store, y)?;
        let w = self.channel_attention_weight(g, store, Stage::First, x)?;
        let x_prime = Self::blend(g, conv_y, y, w)?;
        let w_prime = self.channel_attention_weight(g, store, Stage::Second, x_prime)?;
        let output = Self::blend(g, conv_y, y, w_prime)?;
        Ok(FusionTrace {
            x,
            w,
            x_prime,
            w_prime,
            conv_y,
            output,
        })
    }
}

/// One independent attentional block per subscore head.
pub fn sub_attentional_bank(
    g: &mut Graph,
    store: &ParamStore,
    heads: &[AttentionFusion],
    y: Var,
) -> Result<Vec<Var>> {
    if heads.len() != N_HEADS {
        return Err(Error::InvalidConfig(format!(
            "sub-attentional bank needs {N_HEADS} heads, got {}",
            heads.len()
        )));
    }
    heads
        .iter()
        .map(|h| h.forward(g, store, y).map(|t| t.output))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn baseline_examples() {
        let m = baseline_fuse(FusionMethod::Mean, &[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(m, vec![2.0, 2.0]);
        let m = baseline_fuse(FusionMethod::Median, &[vec![1.0], vec![2.0], vec![9.0]]).unwrap();
        assert_eq!(m, vec![2.0]);
        let m = baseline_fuse(FusionMethod::Median, &[vec![5.0], vec![1.0]]).unwrap();
        assert_eq!(m, vec![1.0]);
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let v = vec![5.0, 6.0, 7.0, 8.0];
        let t = vec![9.0, 10.0, 11.0, 12.0];
        let c = baseline_fuse(FusionMethod::Concatenation, &[a.clone(), v.clone(), t.clone()]).unwrap();
        assert_eq!(c, [a, v, t].concat());
        assert!(baseline_fuse(FusionMethod::Summation, &[vec![1.0]]).is_err());
        assert!(baseline_fuse(FusionMethod::Summation, &[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn method_keys_round_trip() {
        for m in FusionMethod::ALL {
            assert_eq!(m.key().parse::<FusionMethod>().unwrap(), m);
        }
        assert!("avg".parse::<FusionMethod>().is_err());
    }

    #[test]
    fn zero_attention_params_give_half_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = AttentionFusion::new("f");
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        for name in store.params().keys().cloned().collect::<Vec<_>>() {
            if name.contains(".pw") {
                store.get_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new(Mode::Train);
        let y = g
            .input(Tensor::new(vec![2, 1, 3, 4], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap())
            .unwrap();
        let tr = block.forward(&mut g, &store, y).unwrap();
        assert!(g.value(tr.w_prime).data().iter().all(|&w| w == 0.5));
        let (yv, cv, out) = (g.value(y).data(), g.value(tr.conv_y).data(), g.value(tr.output).data());
        for i in 0..24 {
            assert!((out[i] - 0.5 * (cv[i] + yv[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_requires_eight_heads() {
        let mut g = Graph::new(Mode::Train);
        let store = ParamStore::new();
        let y = g.input(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        let heads: Vec<_> = (0..3).map(|i| AttentionFusion::new(format!("h{i}"))).collect();
        assert!(matches!(
            sub_attentional_bank(&mut g, &store, &heads, y),
            Err(Error::InvalidConfig(_))
        ));
    }
}
