//! Adam keyed by parameter name, with moments that survive checkpointing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Parameters, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Debug, Clone)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub lr: f64,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, config: AdamConfig) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {lr} must be positive"
            )));
        }
        Ok(Self {
            config,
            lr,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Drops all moments and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.moments.clear();
    }

    /// One update of every trainable tensor from its accumulated gradient.
    pub fn step(&mut self, groups: &mut [&mut dyn Parameters<T>]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
        let (lr, c1, c2) = (T::lit(self.lr), T::lit(c1), T::lit(c2));
        let moments = &mut self.moments;
        let mut err = Ok(());
        for params in groups.iter_mut() {
            params.visit_mut(&mut |name, p| {
                if err.is_err() || !p.is_trainable() {
                    return;
                }
                let grad = p
                    .grad()
                    .expect("trainable tensors keep a gradient")
                    .to_vec();
                let mo = moments.entry(name.to_string()).or_insert_with(|| Moments {
                    m: Tensor::zeros(p.shape()),
                    v: Tensor::zeros(p.shape()),
                });
                if mo.m.shape() != p.shape() {
                    err = Err(contract(format!(
                        "optimizer state for {name} has the wrong shape"
                    )));
                    return;
                }
                let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
                for (((x, &g), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(&grad)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *mi = b1 * *mi + (T::one() - b1) * g;
                    *vi = b2 * *vi + (T::one() - b2) * g * g;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *x -= lr * mhat / (vhat.sqrt() + eps);
                }
                if p.data().iter().any(|x| !x.is_finite()) {
                    err = Err(Error::Numeric(format!("{name} became non-finite")));
                }
            });
        }
        err
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Tensor<f64>);

    impl Parameters<f64> for One {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
            f("x", &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            f("x", &mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(g)
        let mut p = One(Tensor::new(vec![2], vec![1.0, -1.0])
            .unwrap()
            .trainable(true));
        p.0.accumulate_grad(&[0.5, -2.0]).unwrap();
        let mut opt = Adam::new(0.1, AdamConfig::default()).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.0.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.0.data()[1] + 0.9).abs() < 1e-6);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = One(Tensor::new(vec![1], vec![5.0]).unwrap().trainable(true));
        let mut opt = Adam::new(0.1, AdamConfig::default()).unwrap();
        for _ in 0..500 {
            p.zero_grads();
            let x = p.0.data()[0];
            p.0.accumulate_grad(&[2.0 * (x - 2.0)]).unwrap();
            opt.step(&mut [&mut p]).unwrap();
        }
        assert!((p.0.data()[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn frozen_tensors_are_skipped() {
        let mut p = One(Tensor::new(vec![1], vec![5.0]).unwrap());
        let mut opt = Adam::new(0.1, AdamConfig::default()).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.0.data(), &[5.0]);
        assert!(opt.moments.is_empty());
        assert!(Adam::<f64>::new(0.0, AdamConfig::default()).is_err());
    }
}
