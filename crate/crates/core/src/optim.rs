//! Adam with L2-coupled (default) or decoupled weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters instead of through the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            decoupled: false,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr > 0.0) {
            return Err(format!("train.optimizer.lr must be > 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("train.optimizer.{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(format!("train.optimizer.eps must be > 0, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(format!("train.optimizer.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    moments: HashMap<ParamId, Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    /// Number of parameter tensors holding moment buffers.
    pub fn tracked(&self) -> usize {
        self.moments.len()
    }

    pub fn is_tracked(&self, id: ParamId) -> bool {
        self.moments.contains_key(&id)
    }
}

/// One Adam update. Parameters without a gradient still decay and advance
/// their moments with a zero gradient; frozen parameters are never touched.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (id, g) in grads {
        let p = store.get(*id);
        if g.shape() != p.value.shape() {
            return Err(Error::Usage(format!(
                "gradient shape {:?} does not match parameter {} {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGrad(p.name.clone()));
        }
    }
    let by_id: HashMap<ParamId, &Tensor> = grads.iter().map(|(id, g)| (*id, g)).collect();
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.numel();
        let mom = state.moments.entry(id).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let grad = by_id.get(&id).map(|g| g.data());
        let theta = store.value_mut(id).data_mut();
        for i in 0..n {
            let mut g = grad.map_or(0.0, |g| g[i]);
            if !cfg.decoupled {
                g += cfg.weight_decay * theta[i];
            }
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = mom.m[i] / bc1;
            let v_hat = mom.v[i] / bc2;
            if cfg.decoupled {
                theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
            }
            theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::vector(vec![x]), false);
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new();
        adam_step(&mut s, &[(id, Tensor::vector(vec![1.0]))], &mut st, &cfg).unwrap();
        let moved = 1.0 - s.get(id).value.data()[0];
        assert!((moved - 0.01).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut s, id) = scalar_store(0.7);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new();
        for _ in 0..5 {
            adam_step(&mut s, &[(id, Tensor::vector(vec![0.0]))], &mut st, &cfg).unwrap();
        }
        assert_eq!(s.get(id).value.data()[0], 0.7);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        // f(x) = (x - 3)^2, simulated in closed form alongside the optimizer.
        let (mut s, id) = scalar_store(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new();
        let f = |x: f64| (x - 3.0).powi(2);
        let mut history = vec![f(0.0)];
        for _ in 0..10 {
            let x = s.get(id).value.data()[0];
            adam_step(&mut s, &[(id, Tensor::vector(vec![2.0 * (x - 3.0)]))], &mut st, &cfg).unwrap();
            history.push(f(s.get(id).value.data()[0]));
        }
        for w in history[2..].windows(2) {
            assert!(w[1] < w[0], "{history:?}");
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = scalar_store(0.0);
        let mut st = AdamState::new();
        let err = adam_step(&mut s, &[(id, Tensor::vector(vec![f64::NAN]))], &mut st, &AdamConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains('x'), "{err}");
        assert_eq!(s.get(id).value.data()[0], 0.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_parameters_get_no_state() {
        let mut s = ParamStore::new();
        let frozen = s.add("frozen", Tensor::vector(vec![1.0, 2.0]), true);
        let live = s.add("live", Tensor::vector(vec![1.0]), false);
        let mut st = AdamState::new();
        adam_step(&mut s, &[(live, Tensor::vector(vec![1.0]))], &mut st, &AdamConfig::default()).unwrap();
        assert!(!st.is_tracked(frozen));
        assert!(st.is_tracked(live));
        assert_eq!(s.get(frozen).value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn coupled_and_decoupled_decay_differ() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let run = |decoupled| {
            let (mut s, id) = scalar_store(2.0);
            let mut st = AdamState::new();
            let c = AdamConfig { decoupled, ..cfg };
            adam_step(&mut s, &[(id, Tensor::vector(vec![0.0]))], &mut st, &c).unwrap();
            s.get(id).value.data()[0]
        };
        // Coupled: the decay term is the whole gradient, so Adam moves by lr.
        assert!((run(false) - 1.9).abs() < 1e-6);
        assert!((run(true) - 1.9).abs() < 1e-12);
        assert_ne!(run(false), run(true));
    }
}
