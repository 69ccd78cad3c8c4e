//! Adam with bias correction.

use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, laid out like the [`ParamSet`] they track.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &ParamSet<S>) -> Self {
        let zeros = |t: &Tensor<S>| Tensor::zeros(t.rows(), t.cols());
        Adam {
            config,
            step: 0,
            m: params.tensors().map(zeros).collect(),
            v: params.tensors().map(zeros).collect(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet<S>, grads: &[Tensor<S>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let c = self.config;
        let b1 = S::of(c.beta1);
        let b2 = S::of(c.beta2);
        let one = S::one();
        let bias1 = S::of(1.0 - c.beta1.powi(self.step as i32));
        let bias2 = S::of(1.0 - c.beta2.powi(self.step as i32));
        let lr = S::of(c.lr);
        let eps = S::of(c.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            let entries = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pi, &gi), (mi, vi)) in entries {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bias1;
                let vhat = *vi / bias2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::from_vec(1, 2, vec![1.0, -1.0]));
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.9, 0.999), &p);
        opt.update(&mut p, &[Tensor::from_vec(1, 2, vec![3.0, -0.5])]);
        let w = p.get("w").unwrap();
        assert!((w.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((w.get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::from_vec(1, 3, vec![0.123, -4.5, 7.0]));
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::new(0.0, 0.9, 0.9), &p);
        opt.update(&mut p, &[Tensor::from_vec(1, 3, vec![1.0, 2.0, -3.0])]);
        assert_eq!(p, before);
    }
}
