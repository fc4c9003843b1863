use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::real::{real, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecay {
    /// Shrinks the weights directly, outside the adaptive update.
    Decoupled,
    /// Adds `wd·θ` to the gradient before the moment updates.
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decay_mode: WeightDecay::Decoupled,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.first.get(name)
    }
}

/// One Adam update of every trainable parameter. Trainable parameters without a
/// gradient entry are treated as having a zero gradient; frozen ones are untouched.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let cfg = &state.config;
    let (b1, b2) = (real::<T>(cfg.beta1), real::<T>(cfg.beta2));
    let (lr, eps, wd) = (real::<T>(cfg.lr), real::<T>(cfg.eps), real::<T>(cfg.weight_decay));
    let t = state.step as i32;
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(k, _)| k.to_string())
        .collect();
    for name in names {
        let value = params.get_mut(&name)?;
        let m = state.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(value.shape()));
        let v = state.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(value.shape()));
        let grad = grads.get(&name);
        for i in 0..value.len() {
            let theta = value.data()[i];
            let mut g = grad.map_or(T::zero(), |g| g.data()[i]);
            if cfg.decay_mode == WeightDecay::L2 {
                g += wd * theta;
            }
            let mi = b1 * m.data()[i] + (T::one() - b1) * g;
            let vi = b2 * v.data()[i] + (T::one() - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mut update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            if cfg.decay_mode == WeightDecay::Decoupled {
                update += lr * wd * theta;
            }
            value.data_mut()[i] = theta - update;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64, trainable: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v));
        s.set_trainable("w", trainable);
        s
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(1.0, true);
        let mut st = AdamState::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        adam_step(&mut s, &grad(1.0), &mut st).unwrap();
        let moved = 1.0 - s.get("w").unwrap().item();
        assert!((moved - 5e-4).abs() < 1e-10, "moved {moved}");
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_keeps_value() {
        let mut s = store(0.3, true);
        let mut st = AdamState::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        for _ in 0..3 {
            adam_step(&mut s, &grad(0.0), &mut st).unwrap();
        }
        assert_eq!(s.get("w").unwrap().item(), 0.3);
        assert_eq!(st.step(), 3);
        assert_eq!(st.first_moment("w").unwrap().item(), 0.0);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut s = store(0.123456789, false);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &grad(10.0), &mut st).unwrap();
        assert_eq!(s.get("w").unwrap().item().to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn decoupled_decay_shrinks_towards_zero() {
        let mut s = store(2.0, true);
        let mut st = AdamState::new(AdamConfig { lr: 0.1, weight_decay: 0.5, ..AdamConfig::default() });
        adam_step(&mut s, &grad(0.0), &mut st).unwrap();
        assert!((s.get("w").unwrap().item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = store(1.0, true);
        let mut st = AdamState::new(AdamConfig::default());
        let bad = BTreeMap::from([("w".to_string(), Tensor::<f64>::zeros(&[2]))]);
        assert!(matches!(adam_step(&mut s, &bad, &mut st), Err(Error::Dimension(_))));
    }
}
