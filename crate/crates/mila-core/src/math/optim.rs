//! Adam optimizer over flat parameter vectors.
//!
//! State carries first and second moment accumulators, a step counter, and
//! the hyperparameters. Parameter vectors are labelled by named segments so a
//! non-finite gradient is reported against the block it came from rather than
//! a bare index.

use crate::error::{Error, Result};
use crate::math::{MlpGrads, MlpParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    segments: Vec<(String, usize)>,
}

impl OptState {
    pub fn new(lr: f64, segments: Vec<(String, usize)>) -> Self {
        let n = segments.iter().map(|(_, len)| len).sum();
        OptState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            segments,
        }
    }

    /// State sized for a single MLP, segments labelled per layer.
    pub fn for_mlp(lr: f64, params: &MlpParams) -> Self {
        OptState::new(lr, params.segments(""))
    }

    pub fn n_params(&self) -> usize {
        self.m.len()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn segment_of(&self, index: usize) -> &str {
        let mut offset = 0;
        for (name, len) in &self.segments {
            offset += len;
            if index < offset {
                return name;
            }
        }
        "unlabelled"
    }

    /// One Adam update of `params` in place. Rejects non-finite gradients,
    /// naming the offending segment.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "opt_step: state holds {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient in segment '{}'",
                self.segment_of(bad)
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// One Adam update of an MLP. Convenience wrapper over flat `OptState::apply`.
pub fn opt_step(state: &mut OptState, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
    let mut flat_p = Vec::with_capacity(state.n_params());
    params.flatten_into(&mut flat_p);
    let mut flat_g = Vec::with_capacity(state.n_params());
    grads.flatten_into(&mut flat_g);
    state.apply(&mut flat_p, &flat_g)?;
    params.assign_flat(&flat_p)?;
    Ok(())
}

/// Plain gradient step `params -= lr * grads`, used by inner-loop adaptation.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("sgd_step: length mismatch"));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // f(x) = sum x_i^2, gradient 2x.
        let mut x = vec![1.0, -2.0, 0.5];
        let mut state = OptState::new(0.05, vec![("x".into(), 3)]);
        for _ in 0..400 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            state.apply(&mut x, &g).unwrap();
        }
        let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "did not converge, |x| = {norm}");
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let run = || {
            let mut x = vec![0.3, 0.7];
            let mut state = OptState::new(0.01, vec![("x".into(), 2)]);
            for k in 0..50 {
                let g = vec![x[0] + k as f64 * 0.01, x[1] * 2.0];
                state.apply(&mut x, &g).unwrap();
            }
            x
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_segment() {
        let mut x = vec![0.0; 4];
        let mut state = OptState::new(0.01, vec![("enc".into(), 2), ("head".into(), 2)]);
        let err = state.apply(&mut x, &[0.0, 0.0, f64::NAN, 0.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("head"), "diagnostic was: {msg}");
    }
}
