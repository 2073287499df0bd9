//! Parameterized layers. Each layer owns only its hyperparameters and a name
//! prefix; weights live in a [`ParamStore`] under `"{name}.{field}"`.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

fn buffer<'a>(store: &'a ParamStore, name: &str) -> Result<&'a [f64]> {
    store
        .buffer(name)
        .map(|t| t.data())
        .ok_or_else(|| Error::Graph(format!("missing buffer {name}")))
}

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dLayer {
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let fan_in = self.c_in * self.kernel;
        store.init_uniform(&format!("{}.weight", self.name), &[self.c_out, self.c_in, self.kernel], fan_in, rng);
        store.init_uniform(&format!("{}.bias", self.name), &[self.c_out], fan_in, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let b = g.param(store, &format!("{}.bias", self.name))?;
        g.conv1d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2dLayer {
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let fan_in = self.c_in * self.kernel.0 * self.kernel.1;
        store.init_uniform(
            &format!("{}.weight", self.name),
            &[self.c_out, self.c_in, self.kernel.0, self.kernel.1],
            fan_in,
            rng,
        );
        store.init_uniform(&format!("{}.bias", self.name), &[self.c_out], fan_in, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let b = g.param(store, &format!("{}.bias", self.name))?;
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub name: String,
    pub channels: usize,
}

impl BatchNormLayer {
    pub fn init(&self, store: &mut ParamStore) {
        store.init_batch_norm(&self.name, self.channels);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.gamma", self.name))?;
        let beta = g.param(store, &format!("{}.beta", self.name))?;
        let mean = buffer(store, &format!("{}.running_mean", self.name))?;
        let var = buffer(store, &format!("{}.running_var", self.name))?;
        g.batch_norm(x, gamma, beta, (mean, var), &self.name)
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        store.init_uniform(&format!("{}.weight", self.name), &[self.d_out, self.d_in], self.d_in, rng);
        store.init_uniform(&format!("{}.bias", self.name), &[self.d_out], self.d_in, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let b = g.param(store, &format!("{}.bias", self.name))?;
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct BiLstmLayer {
    pub name: String,
    pub d_in: usize,
    pub hidden: usize,
}

impl BiLstmLayer {
    const FIELDS: [&'static str; 6] = [
        "fwd.w_ih", "fwd.w_hh", "fwd.bias", "bwd.w_ih", "bwd.w_hh", "bwd.bias",
    ];

    /// Forget-gate bias starts at 1, everything else uniform.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let h4 = 4 * self.hidden;
        for dir in ["fwd", "bwd"] {
            store.init_uniform(&format!("{}.{dir}.w_ih", self.name), &[h4, self.d_in], self.d_in, rng);
            store.init_uniform(&format!("{}.{dir}.w_hh", self.name), &[h4, self.hidden], self.hidden, rng);
            store.init_uniform(&format!("{}.{dir}.bias", self.name), &[h4], self.hidden, rng);
            let bias = store.get_mut(&format!("{}.{dir}.bias", self.name)).unwrap();
            bias.data_mut()[self.hidden..2 * self.hidden].iter_mut().for_each(|v| *v = 1.0);
        }
    }

    /// `[B, T, D]` → `[B, T, 2H]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut w = Vec::with_capacity(6);
        for f in Self::FIELDS {
            w.push(g.param(store, &format!("{}.{f}", self.name))?);
        }
        g.bilstm(x, [w[0], w[1], w[2], w[3], w[4], w[5]])
    }

    /// Final forward state ⊕ final backward state: `[B, T, 2H]` → `[B, 2H]`.
    pub fn summary(&self, g: &mut Graph, seq: Var) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        let (bsz, steps, two_h) = (s[0], s[1], s[2]);
        let h = two_h / 2;
        let mut index = Vec::with_capacity(bsz * two_h);
        for b in 0..bsz {
            let last = (b * steps + steps - 1) * two_h;
            index.extend(last..last + h);
            let first = b * steps * two_h;
            index.extend(first + h..first + two_h);
        }
        g.gather(seq, index, &[bsz, two_h])
    }
}
