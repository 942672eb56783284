use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Checkpoint("adam moment tensors disagree".into()));
        }
        Ok(Adam { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Applies one update. A missing gradient counts as zero.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let t = self.step as i32;
        let lr_t = T::lit(c.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t)));
        let eps = T::lit(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.shape() != p.shape() {
                return Err(Error::Shape(format!("parameter {i}: {:?} vs moment {:?}", p.shape(), m.shape())));
            }
            let m = m.data_mut();
            let v = v.data_mut();
            let p = p.data_mut();
            match grads[i] {
                Some(g) => {
                    for (j, &gj) in g.data().iter().enumerate() {
                        m[j] = b1 * m[j] + one_b1 * gj;
                        v[j] = b2 * v[j] + one_b2 * gj * gj;
                        p[j] = p[j] - lr_t * m[j] / (v[j].sqrt() + eps);
                    }
                }
                None => {
                    for j in 0..p.len() {
                        m[j] = b1 * m[j];
                        v[j] = b2 * v[j];
                        p[j] = p[j] - lr_t * m[j] / (v[j].sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::from_vec([1, 1, 1, 2], vec![1.0, -1.0]).unwrap()];
        let g = Tensor::from_vec([1, 1, 1, 2], vec![0.5, -3.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.update(&mut p, &[Some(&g)]).unwrap();
        assert!((p[0].data()[0] - 0.99).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = vec![Tensor::<f64>::from_vec([1, 1, 1, 1], vec![3.0]).unwrap()];
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &p);
        for _ in 0..500 {
            let g = p[0].map(|x| 2.0 * x);
            opt.update(&mut p, &[Some(&g)]).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-2);
    }
}
