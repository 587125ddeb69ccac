//! Adam with bias correction.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, Parameters};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// First and second moment estimates per parameter; lazily zero-initialized.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates one tensor in place. `t` is the 1-based step count.
    fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>, t: u64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("adam_step", param.shape(), grad.shape()));
        }
        let c = self.config;
        let state = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![T::ZERO; param.len()],
            v: vec![T::ZERO; param.len()],
        });
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t as i32));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            *m = b1 * *m + (T::ONE - b1) * g;
            *v = b2 * *v + (T::ONE - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    /// One optimizer step over a flat list of `(name, param, grad)`.
    pub fn step_tensors<'a>(
        &mut self,
        items: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>, &'a Tensor<T>)>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        for (name, p, g) in items {
            self.update(name, p, g, t)?;
        }
        Ok(())
    }

    /// One optimizer step over every trainable tensor of `params`.
    pub fn step<P: Parameters<T> + ?Sized>(&mut self, params: &mut P, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let mut result = Ok(());
        params.visit_mut("", &mut |name, p, kind| {
            if kind != ParamKind::Trainable || result.is_err() {
                return;
            }
            match grads.get(name) {
                Some(g) => result = self.update(name, p, g, t),
                None => result = Err(Error::Config(format!("no gradient for parameter {name}"))),
            }
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar Adam written out longhand.
    fn scalar_adam(mut p: f64, grads: &[f64], c: AdamConfig) -> Vec<f64> {
        let (mut m, mut v) = (0.0, 0.0);
        let mut trace = Vec::new();
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            p -= c.lr * mh / (vh.sqrt() + c.eps);
            trace.push(p);
        }
        trace
    }

    #[test]
    fn first_step_moves_by_lr_regardless_of_scale() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        for g in [1e-3, 0.5, 40.0, -7.0] {
            let mut adam = Adam::<f64>::new(cfg);
            let mut p = Tensor::scalar(1.0);
            let grad = Tensor::scalar(g);
            adam.step_tensors([("p", &mut p, &grad)]).unwrap();
            let moved = (1.0 - p.item()).abs();
            assert!((moved - 0.01).abs() < 1e-6, "g={g} moved {moved}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let mut p = Tensor::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        adam.step_tensors([("p", &mut p, &g)]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn matches_scalar_reference_trace() {
        let cfg = AdamConfig::default();
        let grads = [0.3, 0.3];
        let expected = scalar_adam(0.7, &grads, cfg);
        let mut adam = Adam::<f64>::new(cfg);
        let mut p = Tensor::scalar(0.7);
        for (i, &g) in grads.iter().enumerate() {
            let gt = Tensor::scalar(g);
            adam.step_tensors([("p", &mut p, &gt)]).unwrap();
            assert!((p.item() - expected[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        assert!(adam.step_tensors([("p", &mut p, &g)]).is_err());
    }
}
