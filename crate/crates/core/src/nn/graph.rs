//! Tape-based reverse-mode differentiation over whole-tensor operations.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order; `backward` walks it once in reverse.

use std::collections::{BTreeMap, HashMap};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Probability clamp inside the KL log term.
pub const KL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct LstmCache {
    /// Per direction, per (batch, step): i, f, g, o, c, tanh(c), each of width H.
    gates: [Vec<f64>; 2],
    hidden: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool1d(Var, Vec<usize>),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    BiLstm {
        x: Var,
        w: [Var; 6],
        cache: LstmCache,
    },
    SpatialMean(Var),
    Softmax(Var),
    KlDiv {
        target: Vec<f64>,
        pred: Var,
        row_weights: Vec<f64>,
        scale: f64,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Running-statistics update produced by a batch-norm layer in training mode.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    params: HashMap<String, Var>,
    grads: Option<Vec<Option<Tensor>>>,
    bn_updates: Vec<BnUpdate>,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            params: HashMap::new(),
            grads: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by node {}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf. Gradients can be read back with [`Graph::grad`].
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter; repeated lookups share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter {name}")))?
            .clone();
        let v = self.leaf(t)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.input(t)
    }

    fn binary_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.map(a, |x| scale * x + shift);
        let rg = self.rg(&[a]);
        self.push(t, Op::Affine(a, scale), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::tanh);
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    /// `out[i] = src[index[i]]` over flat storage. Backward scatter-adds, so
    /// one source cell may feed many outputs (broadcasting).
    pub fn gather(&mut self, src: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(shape_err(format!(
                "gather: {} indices for shape {shape:?}",
                index.len()
            )));
        }
        let s = self.value(src).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= s.len()) {
            return Err(shape_err(format!("gather index {bad} out of {}", s.len())));
        }
        let data = index.iter().map(|&i| s[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[src]);
        self.push(t, Op::Gather(src, index), rg)
    }

    /// Permutes axes of a tensor.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if perm.len() != shape.len() {
            return Err(shape_err(format!("permute {perm:?} of {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut strides = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..n {
            index.push(coord.iter().zip(perm).map(|(&c, &p)| c * strides[p]).sum());
            for ax in (0..coord.len()).rev() {
                coord[ax] += 1;
                if coord[ax] < out_shape[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }
        self.gather(a, index, &out_shape)
    }

    /// Concatenates along `axis`; other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| shape_err("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err(format!("concat axis {axis} of {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::new();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err(format!("concat: {s:?} vs {first:?}")));
            }
            widths.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(inputs);
        self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            rg,
        )
    }

    /// `x [B, C_in, T]`, `w [C_out, C_in, K]`, `b [C_out]` → `[B, C_out, T']`,
    /// cross-correlation with zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 3 || bs != [ws[0]] || xs[1] != ws[1] || stride == 0 {
            return Err(shape_err(format!(
                "conv1d: x {xs:?}, w {ws:?}, b {bs:?}, stride {stride}"
            )));
        }
        let (bsz, cin, t) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if t + 2 * pad < k {
            return Err(shape_err(format!(
                "conv1d: length {t} (+2·{pad}) shorter than kernel {k}"
            )));
        }
        let tout = (t + 2 * pad - k) / stride + 1;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bsz * cout * tout];
        for bi in 0..bsz {
            for co in 0..cout {
                let o = &mut out[(bi * cout + co) * tout..(bi * cout + co + 1) * tout];
                o.iter_mut().for_each(|v| *v = bd[co]);
                for ci in 0..cin {
                    let xr = &xd[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                    for kk in 0..k {
                        let wv = wd[(co * cin + ci) * k + kk];
                        let (lo, hi) = valid_range(tout, stride, kk, pad, t);
                        if lo < hi {
                            axpy_strided(&mut o[lo..hi], xr, wv, lo * stride + kk - pad, stride);
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![bsz, cout, tout], out)?;
        let rg = self.rg(&[x, w, b]);
        self.push(
            t,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// `x [B, C_in, H, W]`, `w [C_out, C_in, KH, KW]`, `b [C_out]` → `[B, C_out, H', W']`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4
            || ws.len() != 4
            || bs != [ws[0]]
            || xs[1] != ws[1]
            || stride.0 == 0
            || stride.1 == 0
        {
            return Err(shape_err(format!("conv2d: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (bsz, cin, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad.0 < kh || wd_ + 2 * pad.1 < kw {
            return Err(shape_err(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd_}"
            )));
        }
        let hout = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let wout = (wd_ + 2 * pad.1 - kw) / stride.1 + 1;
        let (xd, wv, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bsz * cout * hout * wout];
        for bi in 0..bsz {
            for co in 0..cout {
                let base = (bi * cout + co) * hout * wout;
                out[base..base + hout * wout].iter_mut().for_each(|v| *v = bd[co]);
                for ci in 0..cin {
                    let xplane = &xd[(bi * cin + ci) * h * wd_..(bi * cin + ci + 1) * h * wd_];
                    for a in 0..kh {
                        let (ilo, ihi) = valid_range(hout, stride.0, a, pad.0, h);
                        for c in 0..kw {
                            let wval = wv[((co * cin + ci) * kh + a) * kw + c];
                            let (jlo, jhi) = valid_range(wout, stride.1, c, pad.1, wd_);
                            for i in ilo..ihi {
                                let xrow = &xplane[(i * stride.0 + a - pad.0) * wd_..];
                                let orow = &mut out[base + i * wout..base + (i + 1) * wout];
                                if jlo < jhi {
                                    axpy_strided(&mut orow[jlo..jhi], xrow, wval, jlo * stride.1 + c - pad.1, stride.1);
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![bsz, cout, hout, wout], out)?;
        let rg = self.rg(&[x, w, b]);
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Batch normalization over axis 1 of `[B, C, ...]`.
    ///
    /// In [`Mode::Train`] the batch statistics (over batch and trailing axes)
    /// are used and a [`BnUpdate`] is recorded under `name`; in [`Mode::Eval`]
    /// the supplied running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f64], &[f64]),
        name: &str,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err(format!("batch_norm needs [B, C, ...], got {xs:?}")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.0.len() != c || running.1.len() != c {
            return Err(shape_err(format!("batch_norm: {c} channels, parameter shape mismatch")));
        }
        let bsz = xs[0];
        let inner: usize = xs[2..].iter().product();
        let count = (bsz * inner) as f64;
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());

        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let vals = || (0..bsz).flat_map(move |b| (0..inner).map(move |i| (b * c + ch) * inner + i));
                let m = vals().map(|i| xd[i]).sum::<f64>() / count;
                let v = vals().map(|i| (xd[i] - m).powi(2)).sum::<f64>() / count;
                mean[ch] = m;
                var[ch] = v;
            }
            (mean, var)
        } else {
            (running.0.to_vec(), running.1.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..bsz {
            for ch in 0..c {
                for i in 0..inner {
                    let idx = (b * c + ch) * inner + i;
                    xhat[idx] = (xd[idx] - mean[ch]) * inv_std[ch];
                    out[idx] = gd[ch] * xhat[idx] + bd[ch];
                }
            }
        }
        if batch_stats {
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            self.bn_updates.push(BnUpdate {
                name: name.to_string(),
                mean,
                var: var.iter().map(|v| v * unbias).collect(),
            });
        }
        let t = Tensor::new(xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    /// Non-overlapping max pooling over the last axis of `[B, C, T]`.
    pub fn max_pool1d(&mut self, x: Var, pool: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || pool == 0 || xs[2] < pool {
            return Err(shape_err(format!("max_pool1d: {xs:?} with pool {pool}")));
        }
        let (rows, t) = (xs[0] * xs[1], xs[2]);
        let tout = t / pool;
        let xd = self.value(x).data();
        let mut arg = Vec::with_capacity(rows * tout);
        let mut out = Vec::with_capacity(rows * tout);
        for r in 0..rows {
            for j in 0..tout {
                let start = r * t + j * pool;
                let mut best = start;
                for i in start + 1..start + pool {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                arg.push(best);
                out.push(xd[best]);
            }
        }
        let t = Tensor::new(vec![xs[0], xs[1], tout], out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::MaxPool1d(x, arg), rg)
    }

    /// `x [B, In]`, `w [Out, In]`, `b [Out]` → `x·wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(shape_err(format!("linear: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (bsz, din, dout) = (xs[0], xs[1], ws[0]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bsz * dout];
        for i in 0..bsz {
            let xr = &xd[i * din..(i + 1) * din];
            for o in 0..dout {
                let wr = &wd[o * din..(o + 1) * din];
                out[i * dout + o] = bd[o] + dot(xr, wr);
            }
        }
        let t = Tensor::new(vec![bsz, dout], out)?;
        let rg = self.rg(&[x, w, b]);
        self.push(t, Op::Linear { x, w, b }, rg)
    }

    /// Bidirectional LSTM over `x [B, T, D]`, returning `[B, T, 2H]` with the
    /// forward pass in the first H columns and the backward pass in the last H.
    ///
    /// `w` = forward `(w_ih [4H, D], w_hh [4H, H], b [4H])` then backward.
    /// Gate order inside the 4H rows: input, forget, candidate, output.
    pub fn bilstm(&mut self, x: Var, w: [Var; 6]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err(format!("bilstm expects [B, T, D], got {xs:?}")));
        }
        let (bsz, steps, din) = (xs[0], xs[1], xs[2]);
        let four_h = self.shape(w[0])[0];
        let hid = four_h / 4;
        for d in 0..2 {
            let (wi, wh, b) = (self.shape(w[3 * d]), self.shape(w[3 * d + 1]), self.shape(w[3 * d + 2]));
            if !four_h.is_multiple_of(4) || wi != [four_h, din] || wh != [four_h, hid] || b != [four_h] {
                return Err(shape_err(format!(
                    "bilstm weights: w_ih {wi:?}, w_hh {wh:?}, b {b:?} for input width {din}"
                )));
            }
        }
        let xd = self.value(x).data().to_vec();
        let mut out = vec![0.0; bsz * steps * 2 * hid];
        let mut gates: [Vec<f64>; 2] = [
            vec![0.0; bsz * steps * 6 * hid],
            vec![0.0; bsz * steps * 6 * hid],
        ];
        for dir in 0..2 {
            let wi = self.value(w[3 * dir]).data();
            let wh = self.value(w[3 * dir + 1]).data();
            let bb = self.value(w[3 * dir + 2]).data();
            let cache = &mut gates[dir];
            let mut pre = vec![0.0; four_h];
            for b in 0..bsz {
                let mut h = vec![0.0; hid];
                let mut c = vec![0.0; hid];
                for s in 0..steps {
                    let t = if dir == 0 { s } else { steps - 1 - s };
                    let xt = &xd[(b * steps + t) * din..(b * steps + t + 1) * din];
                    for r in 0..four_h {
                        pre[r] = bb[r]
                            + dot(&wi[r * din..(r + 1) * din], xt)
                            + dot(&wh[r * hid..(r + 1) * hid], &h);
                    }
                    let slot = &mut cache[(b * steps + t) * 6 * hid..(b * steps + t + 1) * 6 * hid];
                    for j in 0..hid {
                        let ig = sigmoid(pre[j]);
                        let fg = sigmoid(pre[hid + j]);
                        let gg = pre[2 * hid + j].tanh();
                        let og = sigmoid(pre[3 * hid + j]);
                        c[j] = fg * c[j] + ig * gg;
                        let tc = c[j].tanh();
                        h[j] = og * tc;
                        slot[j] = ig;
                        slot[hid + j] = fg;
                        slot[2 * hid + j] = gg;
                        slot[3 * hid + j] = og;
                        slot[4 * hid + j] = c[j];
                        slot[5 * hid + j] = tc;
                    }
                    let o = (b * steps + t) * 2 * hid + dir * hid;
                    out[o..o + hid].copy_from_slice(&h);
                }
            }
        }
        let t = Tensor::new(vec![bsz, steps, 2 * hid], out)?;
        let mut deps = w.to_vec();
        deps.push(x);
        let rg = self.rg(&deps);
        self.push(
            t,
            Op::BiLstm {
                x,
                w,
                cache: LstmCache { gates, hidden: hid },
            },
            rg,
        )
    }

    /// Mean over every axis after the first two: `[B, C, ...]` → `[B, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err(format!("spatial_mean needs [B, C, ...], got {xs:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let xd = self.value(x).data();
        let out = xd.chunks(inner).map(|c| c.iter().sum::<f64>() / inner as f64).collect();
        let t = Tensor::new(vec![xs[0], xs[1]], out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::SpatialMean(x), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(xs, out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// `scale · Σ_r w_r Σ_j t_rj·ln(t_rj / max(p_rj, ε))` over rows of the last
    /// axis; zero-target terms contribute nothing.
    pub fn kl_div(&mut self, target: &Tensor, pred: Var, row_weights: &[f64], scale: f64) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        if target.shape() != ps.as_slice() {
            return Err(shape_err(format!(
                "kl_div: target {:?} vs prediction {ps:?}",
                target.shape()
            )));
        }
        let n = *ps.last().unwrap();
        let rows = target.numel() / n;
        if row_weights.len() != rows {
            return Err(shape_err(format!(
                "kl_div: {} row weights for {rows} rows",
                row_weights.len()
            )));
        }
        let pd = self.value(pred).data();
        let mut total = 0.0;
        for r in 0..rows {
            let mut acc = 0.0;
            for j in r * n..(r + 1) * n {
                let t = target.data()[j];
                if t > 0.0 {
                    acc += t * (t.ln() - pd[j].max(KL_EPS).ln());
                }
            }
            total += row_weights[r] * acc;
        }
        let t = Tensor::scalar(scale * total);
        let rg = self.rg(&[pred]);
        self.push(
            t,
            Op::KlDiv {
                target: target.data().to_vec(),
                pred,
                row_weights: row_weights.to_vec(),
                scale,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar. A second call requires [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Graph(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    /// Gradients of every named parameter touched by this graph. Parameters the
    /// loss does not reach get zero tensors.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let node = &self.nodes[id];
        let mut acc = |v: Var, data: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.data_mut().iter_mut().zip(&data).for_each(|(a, b)| *a += b),
                slot @ None => {
                    *slot = Some(Tensor::new(self.shape(v).to_vec(), data).unwrap());
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Affine(a, s) => acc(*a, gd.iter().map(|v| v * s).collect()),
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                acc(*a, gd.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Reshape(a) => acc(*a, gd.to_vec()),
            Op::Gather(src, index) => {
                let mut d = vec![0.0; self.value(*src).numel()];
                for (&i, &gv) in index.iter().zip(gd) {
                    d[i] += gv;
                }
                acc(*src, d);
            }
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..*outer {
                        d.extend_from_slice(&gd[o * row + offset..o * row + offset + w]);
                    }
                    offset += w;
                    acc(v, d);
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (bsz, cin, t) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                let tout = node.value.shape()[2];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let need_x = self.nodes[x.0].requires_grad;
                let mut dx = vec![0.0; if need_x { xd.len() } else { 0 }];
                let mut dw = vec![0.0; wd.len()];
                let mut db = vec![0.0; cout];
                for bi in 0..bsz {
                    for co in 0..cout {
                        let go = &gd[(bi * cout + co) * tout..(bi * cout + co + 1) * tout];
                        db[co] += go.iter().sum::<f64>();
                        for ci in 0..cin {
                            let xo = (bi * cin + ci) * t;
                            for kk in 0..k {
                                let widx = (co * cin + ci) * k + kk;
                                let (lo, hi) = valid_range(tout, *stride, kk, *pad, t);
                                if lo >= hi {
                                    continue;
                                }
                                let start = xo + lo * stride + kk - pad;
                                dw[widx] += dot_strided(&go[lo..hi], xd, start, *stride);
                                if need_x {
                                    scatter_strided(&mut dx, &go[lo..hi], wd[widx], start, *stride);
                                }
                            }
                        }
                    }
                }
                if need_x {
                    acc(*x, dx);
                }
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (bsz, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let (hout, wout) = (node.value.shape()[2], node.value.shape()[3]);
                let (xd, wv) = (self.value(*x).data(), self.value(*w).data());
                let need_x = self.nodes[x.0].requires_grad;
                let mut dx = vec![0.0; if need_x { xd.len() } else { 0 }];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; cout];
                for bi in 0..bsz {
                    for co in 0..cout {
                        let base = (bi * cout + co) * hout * wout;
                        let go = &gd[base..base + hout * wout];
                        db[co] += go.iter().sum::<f64>();
                        for ci in 0..cin {
                            let xo = (bi * cin + ci) * h * wdt;
                            for a in 0..kh {
                                let (ilo, ihi) = valid_range(hout, stride.0, a, pad.0, h);
                                for c in 0..kw {
                                    let widx = ((co * cin + ci) * kh + a) * kw + c;
                                    let (jlo, jhi) = valid_range(wout, stride.1, c, pad.1, wdt);
                                    if jlo >= jhi {
                                        continue;
                                    }
                                    let mut s = 0.0;
                                    for i in ilo..ihi {
                                        let start = xo + (i * stride.0 + a - pad.0) * wdt + jlo * stride.1 + c - pad.1;
                                        let g_row = &go[i * wout + jlo..i * wout + jhi];
                                        s += dot_strided(g_row, xd, start, stride.1);
                                        if need_x {
                                            scatter_strided(&mut dx, g_row, wv[widx], start, stride.1);
                                        }
                                    }
                                    dw[widx] += s;
                                }
                            }
                        }
                    }
                }
                if need_x {
                    acc(*x, dx);
                }
                acc(*w, dw);
                acc(*b, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let (bsz, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let count = (bsz * inner) as f64;
                let gamma_v = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let idx = |b: usize, ch: usize, i: usize| (b * c + ch) * inner + i;
                for b in 0..bsz {
                    for ch in 0..c {
                        for i in 0..inner {
                            let k = idx(b, ch, i);
                            dgamma[ch] += gd[k] * xhat[k];
                            dbeta[ch] += gd[k];
                        }
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                for ch in 0..c {
                    let scale = gamma_v[ch] * inv_std[ch];
                    for b in 0..bsz {
                        for i in 0..inner {
                            let k = idx(b, ch, i);
                            dx[k] = if *batch_stats {
                                scale * (gd[k] - dbeta[ch] / count - xhat[k] * dgamma[ch] / count)
                            } else {
                                scale * gd[k]
                            };
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::MaxPool1d(x, arg) => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (&i, &gv) in arg.iter().zip(gd) {
                    d[i] += gv;
                }
                acc(*x, d);
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (bsz, din, dout) = (xs[0], xs[1], ws[0]);
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                let mut db = vec![0.0; dout];
                for i in 0..bsz {
                    for o in 0..dout {
                        let gv = gd[i * dout + o];
                        db[o] += gv;
                        for j in 0..din {
                            dw[o * din + j] += gv * xd[i * din + j];
                            dx[i * din + j] += gv * wd[o * din + j];
                        }
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::BiLstm { x, w, cache } => {
                let xs = self.shape(*x);
                let (bsz, steps, din) = (xs[0], xs[1], xs[2]);
                let hid = cache.hidden;
                let four_h = 4 * hid;
                let xd = self.value(*x).data();
                let mut dx = vec![0.0; xd.len()];
                for dir in 0..2 {
                    let wi = self.value(w[3 * dir]).data();
                    let wh = self.value(w[3 * dir + 1]).data();
                    let mut dwi = vec![0.0; wi.len()];
                    let mut dwh = vec![0.0; wh.len()];
                    let mut dbias = vec![0.0; four_h];
                    let gates = &cache.gates[dir];
                    let out = node.value.data();
                    let mut da = vec![0.0; four_h];
                    for b in 0..bsz {
                        let mut dh_next = vec![0.0; hid];
                        let mut dc_next = vec![0.0; hid];
                        for s in (0..steps).rev() {
                            let t = if dir == 0 { s } else { steps - 1 - s };
                            let prev_t = if s == 0 {
                                None
                            } else if dir == 0 {
                                Some(t - 1)
                            } else {
                                Some(t + 1)
                            };
                            let slot = &gates[(b * steps + t) * 6 * hid..(b * steps + t + 1) * 6 * hid];
                            let go = &gd[(b * steps + t) * 2 * hid + dir * hid..][..hid];
                            for j in 0..hid {
                                let (ig, fg, gg, og, _c, tc) = (
                                    slot[j],
                                    slot[hid + j],
                                    slot[2 * hid + j],
                                    slot[3 * hid + j],
                                    slot[4 * hid + j],
                                    slot[5 * hid + j],
                                );
                                let c_prev = match prev_t {
                                    Some(p) => gates[(b * steps + p) * 6 * hid + 4 * hid + j],
                                    None => 0.0,
                                };
                                let dh = go[j] + dh_next[j];
                                let d_o = dh * tc;
                                let dc = dh * og * (1.0 - tc * tc) + dc_next[j];
                                da[j] = dc * gg * ig * (1.0 - ig);
                                da[hid + j] = dc * c_prev * fg * (1.0 - fg);
                                da[2 * hid + j] = dc * ig * (1.0 - gg * gg);
                                da[3 * hid + j] = d_o * og * (1.0 - og);
                                dc_next[j] = dc * fg;
                            }
                            let xt = &xd[(b * steps + t) * din..(b * steps + t + 1) * din];
                            let h_prev: Vec<f64> = match prev_t {
                                Some(p) => out[(b * steps + p) * 2 * hid + dir * hid..][..hid].to_vec(),
                                None => vec![0.0; hid],
                            };
                            dh_next.iter_mut().for_each(|v| *v = 0.0);
                            let dxt = &mut dx[(b * steps + t) * din..(b * steps + t + 1) * din];
                            for r in 0..four_h {
                                let a = da[r];
                                if a == 0.0 {
                                    continue;
                                }
                                dbias[r] += a;
                                let wir = &wi[r * din..(r + 1) * din];
                                let dwir = &mut dwi[r * din..(r + 1) * din];
                                for k in 0..din {
                                    dwir[k] += a * xt[k];
                                    dxt[k] += a * wir[k];
                                }
                                let whr = &wh[r * hid..(r + 1) * hid];
                                let dwhr = &mut dwh[r * hid..(r + 1) * hid];
                                for k in 0..hid {
                                    dwhr[k] += a * h_prev[k];
                                    dh_next[k] += a * whr[k];
                                }
                            }
                        }
                    }
                    acc(w[3 * dir], dwi);
                    acc(w[3 * dir + 1], dwh);
                    acc(w[3 * dir + 2], dbias);
                }
                acc(*x, dx);
            }
            Op::SpatialMean(x) => {
                let numel = self.value(*x).numel();
                let inner = numel / gd.len();
                let d = (0..numel).map(|i| gd[i / inner] / inner as f64).collect();
                acc(*x, d);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                acc(*x, d);
            }
            Op::KlDiv {
                target,
                pred,
                row_weights,
                scale,
            } => {
                let pd = self.value(*pred).data();
                let n = *self.shape(*pred).last().unwrap();
                let d = (0..pd.len())
                    .map(|j| {
                        let t = target[j];
                        if t > 0.0 && pd[j] > KL_EPS {
                            -gd[0] * scale * row_weights[j / n] * t / pd[j]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(*pred, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![gd[0]; n]);
            }
        }
        Ok(())
    }
}

/// `o[j] += w · x[start + j·stride]`.
#[inline]
fn axpy_strided(o: &mut [f64], x: &[f64], w: f64, start: usize, stride: usize) {
    for (ov, xv) in o.iter_mut().zip(x[start..].iter().step_by(stride)) {
        *ov += w * xv;
    }
}

/// `Σ_j g[j] · x[start + j·stride]`.
#[inline]
fn dot_strided(g: &[f64], x: &[f64], start: usize, stride: usize) -> f64 {
    g.iter().zip(x[start..].iter().step_by(stride)).map(|(a, b)| a * b).sum()
}

/// `dx[start + j·stride] += w · g[j]`.
#[inline]
fn scatter_strided(dx: &mut [f64], g: &[f64], w: f64, start: usize, stride: usize) {
    for (d, gv) in dx[start..].iter_mut().step_by(stride).zip(g) {
        *d += w * gv;
    }
}

/// Output positions `j` in `[lo, hi)` whose tap `j·stride + k − pad` lands in `[0, len)`.
fn valid_range(out_len: usize, stride: usize, k: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // j·stride + k − pad ≤ len − 1  ⇔  j ≤ (len − 1 + pad − k)/stride
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for len in 1usize..7 {
            for k in 0..4 {
                for pad in 0..3 {
                    for stride in 1..4 {
                        let out_len = (len + 2 * pad).saturating_sub(3) / stride + 1;
                        let (lo, hi) = valid_range(out_len, stride, k, pad, len);
                        for j in 0..out_len {
                            let pos = (j * stride + k) as isize - pad as isize;
                            let inside = pos >= 0 && (pos as usize) < len;
                            assert_eq!(inside, j >= lo && j < hi, "len {len} k {k} pad {pad} s {stride} j {j}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new(Mode::Train);
        let w = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, -4.0, 1.0]);
        assert!(matches!(g.backward(loss), Err(Error::Graph(_))));
        g.zero_grad();
        g.backward(loss).unwrap();
    }

    #[test]
    fn detached_gets_no_gradient() {
        let mut g = Graph::new(Mode::Train);
        let w = g.leaf(Tensor::scalar(3.0)).unwrap();
        let d = g.detach(w).unwrap();
        let y = g.mul(w, d).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[3.0]);
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new(Mode::Train);
        let w = g.leaf(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(w), Err(Error::Graph(_))));
    }

    #[test]
    fn nan_is_an_error() {
        let mut g = Graph::new(Mode::Train);
        let a = g.leaf(Tensor::scalar(f64::MAX)).unwrap();
        assert!(matches!(g.affine(a, 10.0, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn permute_transposes() {
        let mut g = Graph::new(Mode::Train);
        let a = g.input(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let t = g.permute(a, &[1, 0]).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.value(t).data(), &[1., 4., 2., 5., 3., 6.]);
    }
}
