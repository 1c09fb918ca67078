use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, keyed like the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::contract(format!("learning rate {} must be positive", cfg.lr)));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name:?}")))?;
        if p.len() != g.len() {
            return Err(Error::contract(format!(
                "gradient for {name:?} has {} entries, parameter has {}",
                g.len(),
                p.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        if m.len() != g.len() || v.len() != g.len() {
            return Err(Error::contract(format!("moment shape mismatch for {name:?}")));
        }
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_values(&[vals.len()], vals.to_vec()).unwrap())
            .unwrap();
        s
    }

    fn grads(vals: &[f64]) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("w".to_string(), vals.to_vec())])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(&[1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut st = AdamState::new();
        adam_step(&mut p, &grads(&[0.0; 3]), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut p = store(&[0.0; 4]);
        let mut st = AdamState::new();
        let cfg = AdamConfig::default();
        adam_step(&mut p, &grads(&[1e-3, -5.0, 40.0, -0.2]), &mut st, &cfg).unwrap();
        let w = p.get("w").unwrap().data();
        for (wi, gi) in w.iter().zip([1e-3, -5.0, 40.0, -0.2]) {
            assert!((wi.abs() - cfg.lr).abs() < 1e-7, "{wi}");
            assert_eq!(wi.signum(), -f64::signum(gi));
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let run = || {
            let mut p = store(&[0.3, 0.1]);
            let mut st = AdamState::new();
            for k in 0..5 {
                adam_step(&mut p, &grads(&[0.1 * k as f64, -0.7]), &mut st, &AdamConfig::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
        let mut p = store(&[0.0]);
        let mut st = AdamState::new();
        assert!(adam_step(&mut p, &grads(&[1.0, 2.0]), &mut st, &AdamConfig::default()).is_err());
    }
}
