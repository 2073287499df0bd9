//! Sharpness-aware minimization around a plain SGD base optimizer.
//!
//! One step: `g₁ = ∇L(w)`, `ε̂ = ρ·g₁/‖g₁‖₂` over all parameters flattened,
//! `g₂ = ∇L(w + ε̂)`, then the base optimizer updates the original `w` with `g₂`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub rho: f64,
    pub sgd: SgdConfig,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            rho: 0.05,
            sgd: SgdConfig::default(),
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) {
            return Err(Error::InvalidConfig(format!("rho must be >= 0, got {}", self.rho)));
        }
        if !(self.sgd.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {}", self.sgd.lr)));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must be in [0, 1), got {}", self.sgd.momentum)));
        }
        Ok(())
    }
}

pub type Grads = BTreeMap<String, Tensor>;

/// SGD with optional heavy-ball momentum: `v ← μv + g`, `w ← w − ηv`.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if self.cfg.momentum == 0.0 {
                for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= self.cfg.lr * gv;
                }
            } else {
                let v = self
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.numel()]);
                for ((w, vel), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *vel = self.cfg.momentum * *vel + gv;
                    *w -= self.cfg.lr * *vel;
                }
            }
        }
    }
}

pub fn global_norm(grads: &Grads) -> f64 {
    grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamStep {
    /// Loss at the unperturbed weights.
    pub loss: f64,
    pub grad_norm: f64,
    /// ‖ε̂‖₂; zero when the perturbation was skipped.
    pub perturbation_norm: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct Sam {
    rho: f64,
    base: Sgd,
    evaluations: usize,
}

impl Sam {
    pub fn new(cfg: SamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            rho: cfg.rho,
            base: Sgd::new(cfg.sgd),
            evaluations: 0,
        })
    }

    /// Total loss/gradient evaluations since construction.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    /// `loss_grad` must return the loss and the gradient of every trainable
    /// parameter it touches. A zero first gradient skips the perturbation and
    /// applies the base step with `g₁`.
    pub fn step<F>(&mut self, params: &mut ParamStore, mut loss_grad: F) -> Result<SamStep>
    where
        F: FnMut(&ParamStore) -> Result<(f64, Grads)>,
    {
        let (loss, g1) = loss_grad(params)?;
        self.evaluations += 1;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let grad_norm = global_norm(&g1);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        if grad_norm == 0.0 {
            self.base.step(params, &g1);
            return Ok(SamStep {
                loss,
                grad_norm,
                perturbation_norm: 0.0,
                evaluations: 1,
            });
        }

        let scale = self.rho / grad_norm;
        let mut perturbed = params.clone();
        let mut eps_sq = 0.0;
        for (name, g) in &g1 {
            if let Some(p) = perturbed.get_mut(name) {
                for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    let e = scale * gv;
                    eps_sq += e * e;
                    *w += e;
                }
            }
        }
        let (loss2, g2) = loss_grad(&perturbed)?;
        self.evaluations += 1;
        if !loss2.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss2} at perturbed weights")));
        }
        self.base.step(params, &g2);
        Ok(SamStep {
            loss,
            grad_norm,
            perturbation_norm: eps_sq.sqrt(),
            evaluations: 2,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w));
        s
    }

    fn half_square(s: &ParamStore) -> Result<(f64, Grads)> {
        let w = s.get("w").unwrap().data()[0];
        Ok((0.5 * w * w, BTreeMap::from([("w".to_string(), Tensor::scalar(w))])))
    }

    #[test]
    fn quadratic_step_is_analytic() {
        let mut sam = Sam::new(SamConfig { rho: 0.5, sgd: SgdConfig { lr: 0.1, momentum: 0.0 } }).unwrap();
        let mut s = scalar_store(2.0);
        let step = sam.step(&mut s, half_square).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 1.75);
        assert_eq!(step.perturbation_norm, 0.5);
        assert_eq!(step.evaluations, 2);
    }

    #[test]
    fn zero_gradient_skips_perturbation() {
        let mut sam = Sam::new(SamConfig::default()).unwrap();
        let mut s = scalar_store(0.0);
        let step = sam.step(&mut s, half_square).unwrap();
        assert_eq!(step.evaluations, 1);
        assert_eq!(s.get("w").unwrap().data()[0], 0.0);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut sam = Sam::new(SamConfig::default()).unwrap();
        let mut s = scalar_store(1.0);
        let r = sam.step(&mut s, |_| Ok((f64::NAN, Grads::new())));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn invalid_config() {
        assert!(Sam::new(SamConfig { rho: -1.0, ..Default::default() }).is_err());
        assert!(Sam::new(SamConfig { rho: 0.1, sgd: SgdConfig { lr: 0.0, momentum: 0.0 } }).is_err());
    }
}
