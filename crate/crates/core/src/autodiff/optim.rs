//! AdamW with decoupled weight decay and bias-corrected moments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        AdamWState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        AdamW { lr, ..Self::default() }
    }

    /// One update of `params` in place. The whole step is rejected, leaving
    /// `params` and `state` untouched, if any gradient entry is not finite.
    pub fn step(&self, name: &str, params: &mut [f64], grads: &[f64], state: &mut AdamWState) -> Result<()> {
        if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(Error::Shape {
                node: name.to_string(),
                detail: format!("params {} / grads {} / state {}", params.len(), grads.len(), state.m.len()),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            params[i] *= decay;
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// AdamW applied to every trainable parameter of a graph.
#[derive(Clone, Debug)]
pub struct GraphOptimizer {
    pub config: AdamW,
    states: BTreeMap<NodeId, AdamWState>,
}

impl GraphOptimizer {
    pub fn new(config: AdamW, graph: &Graph) -> Self {
        let states = graph
            .trainable_params()
            .into_iter()
            .map(|id| (id, AdamWState::new(graph.param_value(id).numel())))
            .collect();
        GraphOptimizer { config, states }
    }

    pub fn step(&mut self, graph: &mut Graph, grads: &Gradients) -> Result<()> {
        // Validate everything first so a bad gradient leaves all parameters untouched.
        for (id, g) in grads.iter() {
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(graph.param_name(id).unwrap_or("?").to_string()));
            }
        }
        for (id, g) in grads.iter() {
            let Some(state) = self.states.get_mut(&id) else { continue };
            let name = graph.param_name(id).unwrap_or("?").to_string();
            self.config.step(&name, graph.param_value_mut(id).data_mut(), g.data(), state)?;
        }
        Ok(())
    }

    pub fn state(&self, id: NodeId) -> Option<&AdamWState> {
        self.states.get(&id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_applies_decay_only() {
        let opt = AdamW::default();
        let mut p = [1.0];
        let mut s = AdamWState::new(1);
        opt.step("p", &mut p, &[0.0], &mut s).unwrap();
        assert_eq!(p[0], 1.0 - 1e-4 * 0.01);
        assert!((p[0] - 0.999_999_00).abs() < 1e-12);
    }

    #[test]
    fn first_step_unit_gradient() {
        // m̂ = g and v̂ = g² on the first step, so the update is lr·g/(|g|+ε).
        let opt = AdamW::default();
        let mut p = [1.0];
        let mut s = AdamWState::new(1);
        opt.step("p", &mut p, &[1.0], &mut s).unwrap();
        let expected = (1.0 - 1e-6) - 1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.999899).abs() < 1e-9);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn scalar_descent_without_decay() {
        let opt = AdamW { lr: 0.1, weight_decay: 0.0, ..AdamW::default() };
        let mut theta = [2.0];
        let mut s = AdamWState::new(1);
        let mut f = theta[0] * theta[0];
        for _ in 0..2 {
            let g = 2.0 * theta[0];
            opt.step("theta", &mut theta, &[g], &mut s).unwrap();
            let f_next = theta[0] * theta[0];
            assert!(f_next < f);
            f = f_next;
        }
    }

    #[test]
    fn non_finite_gradient_rejected_untouched() {
        let opt = AdamW::default();
        let mut p = [1.0, 2.0];
        let mut s = AdamWState::new(2);
        let err = opt.step("w1", &mut p, &[0.5, f64::NAN], &mut s).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w1"));
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn second_moment_non_negative_and_step_counts() {
        let opt = AdamW::default();
        let mut p = [0.3, -0.2, 0.0];
        let mut s = AdamWState::new(3);
        for k in 1..=5 {
            opt.step("p", &mut p, &[-1.0, 0.5, 2.0], &mut s).unwrap();
            assert_eq!(s.step, k);
            assert!(s.v.iter().all(|&v| v >= 0.0));
        }
    }
}
