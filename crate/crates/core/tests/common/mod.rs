//! Shared fixtures: random tensors, the gradient-check suite and small corpora.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use depfusion_core::corpus::{self, PrepConfig, SynthConfig};
use depfusion_core::features::ClipSample;
use depfusion_core::fusion::{self, AttentionFusion, FusionMethod, Stage};
use depfusion_core::model::{Batch, BranchConfig, Modality, Model, ModelConfig};
use depfusion_core::musdl::{self, MusdlConfig};
use depfusion_core::nn::gradcheck::{check_gradients, GradCheckReport};
use depfusion_core::nn::{
    BatchNormLayer, BiLstmLayer, Conv1dLayer, Conv2dLayer, Graph, LinearLayer, Mode, ParamStore, Tensor, Var,
};
use depfusion_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ y ⊙ R` for a fixed random `R`, so no output entry has a symmetric
/// cancellation in its gradient.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = rand_tensor(g.shape(y), &mut rng(seed));
    let r = g.input(r)?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

/// Backward once, then finite differences over every entry of every
/// parameter in `store` (capped at `cap` probes per tensor).
pub fn check<F>(store: &ParamStore, cap: Option<usize>, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new(Mode::Train);
    let loss = build(&mut g, store).unwrap();
    g.backward(loss).unwrap();
    let grads = g.param_grads();
    assert_eq!(
        grads.keys().collect::<Vec<_>>(),
        store.params().keys().collect::<Vec<_>>(),
        "every parameter must receive a gradient"
    );
    check_gradients(store, &grads, 1e-5, cap, |s| {
        let mut g = Graph::new(Mode::Train);
        let l = build(&mut g, s)?;
        Ok(g.value(l).data()[0])
    })
    .unwrap()
}

fn with_input(shape: &[usize], seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    store.insert("x", rand_tensor(shape, &mut rng(seed)));
    store
}

/// `(name, report)` for every layer and graph op with a backward rule.
pub fn layer_checks() -> Vec<(&'static str, GradCheckReport)> {
    let mut out = Vec::new();
    let mut r = rng(11);

    let conv1 = Conv1dLayer {
        name: "c".into(),
        c_in: 3,
        c_out: 4,
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    let mut s = with_input(&[2, 3, 9], 1);
    conv1.init(&mut s, &mut r);
    out.push((
        "conv1d",
        check(&s, None, |g, s| {
            let x = g.param(s, "x")?;
            let y = conv1.forward(g, s, x)?;
            weighted_sum(g, y, 100)
        }),
    ));

    let conv2 = Conv2dLayer {
        name: "c".into(),
        c_in: 2,
        c_out: 3,
        kernel: (3, 2),
        stride: (1, 2),
        pad: (1, 1),
    };
    let mut s = with_input(&[2, 2, 5, 6], 2);
    conv2.init(&mut s, &mut r);
    out.push((
        "conv2d",
        check(&s, None, |g, s| {
            let x = g.param(s, "x")?;
            let y = conv2.forward(g, s, x)?;
            weighted_sum(g, y, 101)
        }),
    ));

    let bn = BatchNormLayer {
        name: "bn".into(),
        channels: 3,
    };
    let mut s = with_input(&[4, 3, 5], 3);
    bn.init(&mut s);
    s.insert("bn.gamma", rand_tensor(&[3], &mut r));
    s.insert("bn.beta", rand_tensor(&[3], &mut r));
    out.push((
        "batch_norm",
        check(&s, None, |g, s| {
            let x = g.param(s, "x")?;
            let y = bn.forward(g, s, x)?;
            weighted_sum(g, y, 102)
        }),
    ));

    let lin = LinearLayer {
        name: "fc".into(),
        d_in: 5,
        d_out: 3,
    };
    let mut s = with_input(&[3, 5], 4);
    lin.init(&mut s, &mut r);
    out.push((
        "linear",
        check(&s, None, |g, s| {
            let x = g.param(s, "x")?;
            let y = lin.forward(g, s, x)?;
            weighted_sum(g, y, 103)
        }),
    ));

    let lstm = BiLstmLayer {
        name: "lstm".into(),
        d_in: 3,
        hidden: 4,
    };
    let mut s = with_input(&[2, 5, 3], 5);
    lstm.init(&mut s, &mut r);
    out.push((
        "bilstm",
        check(&s, None, |g, s| {
            let x = g.param(s, "x")?;
            let y = lstm.forward(g, s, x)?;
            weighted_sum(g, y, 104)
        }),
    ));
    out.push((
        "bilstm_summary",
        check(&s, None, |g, s| {
            let x = g.param(s, "x")?;
            let y = lstm.forward(g, s, x)?;
            let y = lstm.summary(g, y)?;
            weighted_sum(g, y, 105)
        }),
    ));

    let s = with_input(&[2, 3, 8], 6);
    out.push((
        "max_pool1d",
        check(&s, None, |g, s| {
            let x = g.param(s, "x")?;
            let y = g.max_pool1d(x, 3)?;
            weighted_sum(g, y, 106)
        }),
    ));

    let s = with_input(&[3, 4], 7);
    type Unary = fn(&mut Graph, Var) -> Result<Var>;
    let unary: [(&'static str, Unary); 6] = [
        ("relu", |g, x| g.relu(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("tanh", |g, x| g.tanh(x)),
        ("softmax", |g, x| g.softmax(x)),
        ("affine", |g, x| g.affine(x, -1.5, 0.25)),
        ("permute", |g, x| g.permute(x, &[1, 0])),
    ];
    for (name, f) in unary {
        out.push((
            name,
            check(&s, None, |g, s| {
                let x = g.param(s, "x")?;
                let y = f(g, x)?;
                weighted_sum(g, y, 107)
            }),
        ));
    }

    let mut s = with_input(&[2, 3, 2, 2], 8);
    s.insert("z", rand_tensor(&[2, 3, 2, 2], &mut r));
    out.push((
        "add_sub_mul",
        check(&s, None, |g, s| {
            let x = g.param(s, "x")?;
            let z = g.param(s, "z")?;
            let a = g.add(x, z)?;
            let m = g.mul(a, z)?;
            let y = g.sub(m, x)?;
            weighted_sum(g, y, 108)
        }),
    ));
    out.push((
        "concat_gather_reshape",
        check(&s, None, |g, s| {
            let x = g.param(s, "x")?;
            let z = g.param(s, "z")?;
            let c = g.concat(&[x, z], 1)?;
            let flat = g.reshape(c, &[2, 24])?;
            let y = g.gather(flat, vec![0, 5, 5, 30, 47, 12], &[2, 3])?;
            weighted_sum(g, y, 109)
        }),
    ));
    let s = with_input(&[2, 3, 2, 2], 9);
    out.push((
        "spatial_mean",
        check(&s, None, |g, s| {
            let x = g.param(s, "x")?;
            let y = g.spatial_mean(x)?;
            weighted_sum(g, y, 110)
        }),
    ));
    out
}

/// Both attentional blocks, single and per-head, with randomized BN affine
/// parameters so no path is trivially constant.
pub fn fusion_stack_checks() -> Vec<(&'static str, GradCheckReport)> {
    let mut r = rng(21);
    let mut s = with_input(&[3, 1, 3, 4], 9);
    let single = AttentionFusion::new("f");
    single.init(&mut s, &mut r);
    for name in s.params().keys().cloned().collect::<Vec<_>>() {
        if name.ends_with(".gamma") || name.ends_with(".beta") {
            s.insert(name, rand_tensor(&[1], &mut r));
        }
    }
    let mut out = vec![(
        "attentional_fusion",
        check(&s, None, |g, s| {
            let y = g.param(s, "x")?;
            let t = single.forward(g, s, y)?;
            weighted_sum(g, t.output, 120)
        }),
    )];

    let mut s = with_input(&[2, 1, 2, 3], 10);
    let heads: Vec<AttentionFusion> = (0..8).map(|k| AttentionFusion::new(format!("h{k}"))).collect();
    for h in &heads {
        h.init(&mut s, &mut r);
    }
    out.push((
        "sub_attentional_bank",
        check(&s, Some(6), |g, s| {
            let y = g.param(s, "x")?;
            let outs = fusion::sub_attentional_bank(g, s, &heads, y)?;
            let all = g.concat(&outs, 1)?;
            weighted_sum(g, all, 121)
        }),
    ));

    let mut s = with_input(&[2, 5], 12);
    s.insert("z", rand_tensor(&[2, 5], &mut r));
    s.insert("u", rand_tensor(&[2, 5], &mut r));
    for (name, method) in [
        ("baseline_mult", FusionMethod::Multiplication),
        ("baseline_concat", FusionMethod::Concatenation),
        ("baseline_median", FusionMethod::Median),
        ("baseline_max", FusionMethod::Maximum),
        ("baseline_sum", FusionMethod::Summation),
        ("baseline_mean", FusionMethod::Mean),
    ] {
        out.push((
            name,
            check(&s, None, |g, s| {
                let feats = [g.param(s, "x")?, g.param(s, "z")?, g.param(s, "u")?];
                let y = fusion::baseline_fuse_graph(g, method, &feats)?;
                weighted_sum(g, y, 122)
            }),
        ));
    }
    out
}

/// KL against Gaussian soft targets through a softmax, with uneven row weights.
pub fn kl_check() -> GradCheckReport {
    let cfg = MusdlConfig::default();
    let soft = musdl::transform_labels(&[0, 3, 1, 2], &cfg).unwrap();
    let target = Tensor::new(vec![2, 2, cfg.expanded], soft.values).unwrap();
    let s = with_input(&[2, 2, cfg.expanded], 13);
    check(&s, None, |g, s| {
        let x = g.param(s, "x")?;
        let p = g.softmax(x)?;
        g.kl_div(&target, p, &[0.5, 1.0, 1.0, 2.0], 0.5)
    })
}

pub fn mini_model_config(modality: Modality, fusion: FusionMethod) -> ModelConfig {
    let branch = |channels: Vec<usize>, kernel, stride, pool| BranchConfig {
        channels,
        kernel,
        stride,
        pool,
        hidden: 3,
    };
    ModelConfig {
        modality,
        fusion,
        d: 4,
        n_mels: 6,
        audio: branch(vec![3, 3], 3, 1, 2),
        visual: branch(vec![2], 3, 2, 1),
        text: branch(vec![3], 3, 1, 2),
        ..ModelConfig::default()
    }
}

/// Random channel-first batch for [`mini_model_config`].
pub fn mini_batch(bsz: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    Batch {
        audio: Some(rand_tensor(&[bsz, 6, 12], &mut r)),
        visual: Some(rand_tensor(&[bsz, 3, 72, 6], &mut r)),
        text: Some(rand_tensor(&[bsz, 512, 6], &mut r)),
        subscores: (0..bsz).map(|_| std::array::from_fn(|_| r.gen_range(0..4))).collect(),
    }
}

/// Full AVT sub-attentional model with class-weighted KL loss.
pub fn mini_model_check() -> GradCheckReport {
    let model = Model::new(mini_model_config(Modality::AVT, FusionMethod::SubAttention)).unwrap();
    let store = model.init(3);
    let batch = mini_batch(3, 14);
    check(&store, Some(4), |g, s| {
        let fwd = model.forward(g, s, &batch)?;
        model.loss(g, fwd.probs, &batch.subscores, true)
    })
}

/// Short sessions: one or two clips per participant.
pub fn small_corpus(n: usize, seed: u64) -> Vec<ClipSample> {
    let cfg = SynthConfig {
        seed,
        n_participants: n,
        min_duration_s: 60.0,
        max_duration_s: 115.0,
        ..SynthConfig::default()
    };
    let parts = corpus::synthesize(&cfg).unwrap();
    corpus::synthetic_clips(&parts, &PrepConfig::default()).unwrap()
}

/// Lower median by counting: the smallest value with at least ⌈n/2⌉ entries ≤ it.
pub fn median_by_counting(col: &[f64]) -> f64 {
    let need = col.len().div_ceil(2);
    *col.iter()
        .filter(|&&v| col.iter().filter(|&&u| u <= v).count() >= need)
        .min_by(|a, b| a.total_cmp(b))
        .unwrap()
}

pub fn baseline_oracle(method: FusionMethod, vs: &[Vec<f64>]) -> Vec<f64> {
    let d = vs[0].len();
    let col = |j: usize| vs.iter().map(|v| v[j]).collect::<Vec<_>>();
    match method {
        FusionMethod::Multiplication => (0..d).map(|j| col(j).iter().fold(1.0, |a, b| a * b)).collect(),
        FusionMethod::Concatenation => vs.iter().flatten().copied().collect(),
        FusionMethod::Median => (0..d).map(|j| median_by_counting(&col(j))).collect(),
        FusionMethod::Maximum => (0..d)
            .map(|j| {
                let c = col(j);
                *c.iter().find(|&&v| c.iter().all(|&u| u <= v)).unwrap()
            })
            .collect(),
        FusionMethod::Summation => (0..d).map(|j| col(j).iter().fold(0.0, |a, b| a + b)).collect(),
        FusionMethod::Mean => (0..d).map(|j| col(j).iter().fold(0.0, |a, b| a + b) / vs.len() as f64).collect(),
        _ => unreachable!(),
    }
}

pub const BASELINES: [FusionMethod; 6] = [
    FusionMethod::Multiplication,
    FusionMethod::Concatenation,
    FusionMethod::Median,
    FusionMethod::Maximum,
    FusionMethod::Summation,
    FusionMethod::Mean,
];

pub fn grad_norm(grads: &BTreeMap<String, Tensor>, prefix: &str) -> f64 {
    grads
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(_, t)| t.sum_sq())
        .sum::<f64>()
        .sqrt()
}

/// Gradients of a loss that reads only head `k`'s distribution.
pub fn head_grads(model: &Model, store: &ParamStore, k: usize) -> BTreeMap<String, Tensor> {
    let batch = mini_batch(3, 40);
    let mut g = Graph::new(Mode::Train);
    let fwd = model.forward(&mut g, store, &batch).unwrap();
    let m = model.cfg.musdl.expanded;
    let index: Vec<usize> = (0..3).flat_map(|b| (b * 8 + k) * m..(b * 8 + k + 1) * m).collect();
    let row = g.gather(fwd.probs, index, &[3, m]).unwrap();
    let loss = weighted_sum(&mut g, row, 41).unwrap();
    g.backward(loss).unwrap();
    g.param_grads()
}

/// Output of one attentional block with the second-stage attention pinned.
pub fn saturated(shift: f64) -> (Tensor, Tensor, Tensor) {
    let block = AttentionFusion::new("f");
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng(8));
    for path in ["global", "local"] {
        store.insert(block.final_shift_name(Stage::Second, path), Tensor::full(&[1], shift));
    }
    let y = rand_tensor(&[2, 1, 3, 5], &mut rng(9));
    let mut g = Graph::new(Mode::Train);
    let yv = g.input(y.clone()).unwrap();
    let t = block.forward(&mut g, &store, yv).unwrap();
    (g.value(t.output).clone(), g.value(t.conv_y).clone(), y)
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}
