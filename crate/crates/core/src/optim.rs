//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};
use crate::params::ParamStore;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates, indexed like the parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Checks that the state was built for parameters of these sizes.
    pub fn matches(&self, params: &ParamStore) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .enumerate()
                .all(|(i, (_, _, t))| self.m[i].len() == t.len() && self.v[i].len() == t.len())
    }

    /// One update. A non-finite gradient leaves both parameters and state
    /// untouched and returns [`PieError::NonFiniteGradient`].
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        if !grads.all_finite() {
            return Err(PieError::NonFiniteGradient);
        }
        let ids: Vec<_> = params.ids().collect();
        for &id in &ids {
            if let Some(g) = grads.get(id) {
                if g.shape() != params.get(id).shape() {
                    return Err(crate::tensor::TensorError::ShapeMismatch {
                        op: "adam",
                        left: params.get(id).shape().to_vec(),
                        right: g.shape().to_vec(),
                    }
                    .into());
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, &id) in ids.iter().enumerate() {
            let zero;
            let g: &Tensor = match grads.get(id) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(params.get(id).shape());
                    &zero
                }
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in params.get_mut(id).data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::ParamId;
    use crate::tape::Tape;

    fn grads_for(params: &ParamStore, value: f64) -> Gradients {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let v = p[ParamId(0)];
        let s = tape.sum(v).unwrap();
        let loss = tape.mul_scalar(s, value).unwrap();
        tape.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut params = ParamStore::new();
        params.add("w", Tensor::vector(&[1.0, -2.0]));
        let mut st = AdamState::new(&params);
        let g = grads_for(&params, 0.0);
        st.step(&mut params, &g, &AdamConfig::default()).unwrap();
        assert_eq!(params.get(ParamId(0)).data(), &[1.0, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_is_learning_rate() {
        let mut params = ParamStore::new();
        params.add("w", Tensor::scalar(0.0));
        let mut st = AdamState::new(&params);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let g = grads_for(&params, 1.0);
        st.step(&mut params, &g, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −0.1 / (1 + 1e-8)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((params.get(ParamId(0)).item().unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut params = ParamStore::new();
        params.add("w", Tensor::scalar(1.0));
        let mut st = AdamState::new(&params);
        let before = st.clone();
        let g = grads_for(&params, f64::NAN);
        assert!(matches!(st.step(&mut params, &g, &AdamConfig::default()), Err(PieError::NonFiniteGradient)));
        assert_eq!(st, before);
        assert_eq!(params.get(ParamId(0)).item(), Some(1.0));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut params = ParamStore::new();
            params.add("w", Tensor::vector(&[0.3, -0.7, 1.1]));
            let mut st = AdamState::new(&params);
            for i in 0..50 {
                let g = grads_for(&params, (i as f64 * 0.37).sin());
                st.step(&mut params, &g, &AdamConfig::default()).unwrap();
            }
            params.get(ParamId(0)).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
