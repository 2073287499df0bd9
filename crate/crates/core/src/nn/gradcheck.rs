//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for near-zero gradients.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

/// Compares `analytic` against `(L(θ + h) − L(θ − h)) / 2h` entry by entry.
///
/// `max_per_tensor` caps the number of probed entries per tensor (evenly
/// strided); `None` checks everything.
pub fn check_gradients(
    store: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    step: f64,
    max_per_tensor: Option<usize>,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (name, grad) in analytic {
        let n = grad.numel();
        let stride = match max_per_tensor {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = probe
                .get(name)
                .ok_or_else(|| Error::Graph(format!("no parameter {name}")))?
                .data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let up = loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let down = loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![2], vec![3.0, -1.0]).unwrap())]);
        let r = check_gradients(&store, &grads, 1e-5, None, |s| Ok(s.get("w").unwrap().sum_sq())).unwrap();
        assert!(r.max_rel_error < 1e-8);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn wrong_gradient_detected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(2.0));
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        let r = check_gradients(&store, &grads, 1e-5, None, |s| Ok(s.get("w").unwrap().sum_sq())).unwrap();
        // analytic 1 vs numeric 4
        assert!((r.max_rel_error - 0.75).abs() < 1e-6);
    }
}
