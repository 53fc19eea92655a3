//! Multilayer perceptrons with explicit forward tapes and hand-written
//! backpropagation. Parameters flatten to a canonical order (per layer:
//! weights row-major, then bias) shared by checkpoints, the optimizer, and
//! finite-difference checks.

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::rng::Rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `z` with post-activation `a` given.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform on +-sqrt(6 / (fan_in + fan_out)); biases zero.
    Xavier,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    weights: Vec<Mat>,
    biases: Vec<Vec<f64>>,
    activations: Vec<Activation>,
}

/// Intermediate values of one forward pass, consumed by `backward`.
pub struct MlpTape {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("tape has at least one layer")
    }
}

/// Gradients shaped like `MlpParams`.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            weights: params
                .weights
                .iter()
                .map(|w| Mat::zeros(w.rows(), w.cols()))
                .collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            for v in w.data_mut() {
                *v *= s;
            }
        }
        for b in &mut self.biases {
            for v in b {
                *v *= s;
            }
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
    }
}

impl MlpParams {
    /// Build an MLP with layer sizes `dims` (input first) and one activation
    /// per layer.
    pub fn new(dims: &[usize], activations: &[Activation], init: Init, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("mlp needs at least one layer".into()));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "mlp with {} layers got {} activations",
                dims.len() - 1,
                activations.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("mlp layer size zero".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let w = match init {
                Init::Xavier => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Mat::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound))
                }
                Init::Zeros => Mat::zeros(fan_out, fan_in),
            };
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(MlpParams { weights, biases, activations: activations.to_vec() })
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").rows()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    /// Layer shapes chain and every parameter is finite.
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.biases.len() || self.weights.len() != self.activations.len() {
            return Err(Error::Config("mlp: layer count mismatch".into()));
        }
        for l in 0..self.weights.len() {
            if self.biases[l].len() != self.weights[l].rows() {
                return Err(Error::Config(format!("mlp: bias shape at layer {l}")));
            }
            if l > 0 && self.weights[l].cols() != self.weights[l - 1].rows() {
                return Err(Error::Config(format!("mlp: shape break between layers {} and {l}", l - 1)));
            }
            if !self.weights[l].is_finite() || self.biases[l].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("mlp parameters at layer {l}")));
            }
        }
        Ok(())
    }

    /// A regression head additionally ends with an identity layer.
    pub fn validate_regression_head(&self) -> Result<()> {
        self.validate()?;
        if *self.activations.last().expect("at least one layer") != Activation::Identity {
            return Err(Error::Config("regression head must end with identity activation".into()));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<MlpTape> {
        if input.len() != self.in_dim() {
            return Err(Error::dim(format!(
                "mlp forward: input {} but expects {}",
                input.len(),
                self.in_dim()
            )));
        }
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut post = Vec::with_capacity(self.weights.len());
        let mut x = input.to_vec();
        for l in 0..self.weights.len() {
            let mut z = self.weights[l].matvec(&x)?;
            for (zi, bi) in z.iter_mut().zip(&self.biases[l]) {
                *zi += bi;
            }
            let a: Vec<f64> = z.iter().map(|&v| self.activations[l].apply(v)).collect();
            x = a.clone();
            pre.push(z);
            post.push(a);
        }
        Ok(MlpTape { input: input.to_vec(), pre, post })
    }

    /// Backpropagate `dl_dout` through `tape`, accumulating parameter
    /// gradients into `grads`; returns the gradient w.r.t. the input.
    pub fn backward_into(
        &self,
        tape: &MlpTape,
        dl_dout: &[f64],
        grads: &mut MlpGrads,
    ) -> Result<Vec<f64>> {
        if dl_dout.len() != self.out_dim() {
            return Err(Error::dim("mlp backward: output gradient length"));
        }
        let mut delta = dl_dout.to_vec();
        for l in (0..self.weights.len()).rev() {
            let act = self.activations[l];
            let pre = &tape.pre[l];
            let post = &tape.post[l];
            for i in 0..delta.len() {
                delta[i] *= act.derivative(pre[i], post[i]);
            }
            let below: &[f64] = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            let gw = &mut grads.weights[l];
            for i in 0..delta.len() {
                let di = delta[i];
                if di != 0.0 {
                    for (j, &bj) in below.iter().enumerate() {
                        gw.add_at(i, j, di * bj);
                    }
                }
                grads.biases[l][i] += di;
            }
            delta = self.weights[l].tr_matvec(&delta)?;
        }
        Ok(delta)
    }

    pub fn backward(&self, tape: &MlpTape, dl_dout: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        let mut grads = MlpGrads::zeros_like(self);
        let dl_din = self.backward_into(tape, dl_dout, &mut grads)?;
        Ok((grads, dl_din))
    }

    pub fn n_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.rows() * w.cols() + b.len())
            .sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
    }

    /// Overwrite parameters from `flat`, returning how many values were read.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<usize> {
        let needed = self.n_params();
        if flat.len() < needed {
            return Err(Error::dim(format!(
                "mlp assign: {} values for {} parameters",
                flat.len(),
                needed
            )));
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wlen = w.rows() * w.cols();
            w.data_mut().copy_from_slice(&flat[k..k + wlen]);
            k += wlen;
            let blen = b.len();
            b.copy_from_slice(&flat[k..k + blen]);
            k += blen;
        }
        Ok(needed)
    }

    /// Per-layer segment labels and sizes in flatten order, for optimizer
    /// diagnostics.
    pub fn segments(&self, prefix: &str) -> Vec<(String, usize)> {
        let mut segs = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            segs.push((format!("{prefix}layer{l}.weights"), w.rows() * w.cols()));
            segs.push((format!("{prefix}layer{l}.bias"), b.len()));
        }
        segs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::fd_gradient;
    use crate::rng::rng_from_seed;

    fn toy_mlp(rng: &mut Rng) -> MlpParams {
        MlpParams::new(
            &[4, 8, 3],
            &[Activation::Tanh, Activation::Identity],
            Init::Xavier,
            rng,
        )
        .unwrap()
    }

    #[test]
    fn shapes_chain_or_construction_fails() {
        let mut rng = rng_from_seed(0);
        assert!(MlpParams::new(&[4], &[], Init::Xavier, &mut rng).is_err());
        assert!(MlpParams::new(&[4, 3], &[], Init::Xavier, &mut rng).is_err());
        assert!(MlpParams::new(&[4, 0, 2], &[Activation::Tanh, Activation::Identity], Init::Xavier, &mut rng).is_err());
        let ok = toy_mlp(&mut rng);
        ok.validate().unwrap();
        ok.validate_regression_head().unwrap();
    }

    #[test]
    fn head_validation_requires_identity_output() {
        let mut rng = rng_from_seed(1);
        let m = MlpParams::new(&[3, 3], &[Activation::Tanh], Init::Xavier, &mut rng).unwrap();
        assert!(m.validate_regression_head().is_err());
    }

    #[test]
    fn flatten_assign_round_trip() {
        let mut rng = rng_from_seed(2);
        let m = toy_mlp(&mut rng);
        let mut flat = Vec::new();
        m.flatten_into(&mut flat);
        assert_eq!(flat.len(), m.n_params());
        let mut other = toy_mlp(&mut rng);
        other.assign_flat(&flat).unwrap();
        assert_eq!(m, other);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_from_seed(3);
        let m = toy_mlp(&mut rng);
        let input = [0.3, -0.8, 0.1, 0.9];
        // Scalar loss: sum of squared outputs.
        let tape = m.forward(&input).unwrap();
        let dl_dout: Vec<f64> = tape.output().iter().map(|y| 2.0 * y).collect();
        let (grads, dl_din) = m.backward(&tape, &dl_dout).unwrap();
        let mut analytic = Vec::new();
        grads.flatten_into(&mut analytic);
        analytic.extend_from_slice(&dl_din);

        let mut point = Vec::new();
        m.flatten_into(&mut point);
        point.extend_from_slice(&input);
        let n_params = m.n_params();
        let mut scratch = m.clone();
        let numeric = fd_gradient(
            |p| {
                scratch.assign_flat(&p[..n_params]).unwrap();
                let t = scratch.forward(&p[n_params..]).unwrap();
                Ok(t.output().iter().map(|y| y * y).sum())
            },
            &point,
            1e-6,
        )
        .unwrap();

        let num_norm = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err_norm = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        assert!(
            err_norm / num_norm < 1e-6,
            "gradient mismatch: relative error {:.3e}",
            err_norm / num_norm
        );
    }

    #[test]
    fn relu_backward_matches_finite_differences_away_from_kinks() {
        let mut rng = rng_from_seed(4);
        let m = MlpParams::new(
            &[3, 6, 2],
            &[Activation::Relu, Activation::Identity],
            Init::Xavier,
            &mut rng,
        )
        .unwrap();
        let input = [0.7, -0.4, 0.2];
        let tape = m.forward(&input).unwrap();
        let dl_dout: Vec<f64> = tape.output().iter().map(|y| 2.0 * y).collect();
        let (grads, _) = m.backward(&tape, &dl_dout).unwrap();
        let mut analytic = Vec::new();
        grads.flatten_into(&mut analytic);

        let mut point = Vec::new();
        m.flatten_into(&mut point);
        let mut scratch = m.clone();
        let numeric = fd_gradient(
            |p| {
                scratch.assign_flat(p).unwrap();
                let t = scratch.forward(&input).unwrap();
                Ok(t.output().iter().map(|y| y * y).sum())
            },
            &point,
            1e-7,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-5 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }
}
