//! SGD with momentum and a cosine-annealed learning rate.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            total_steps: 1,
            batch_size: 48,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    /// `base_lr * (1 + cos(pi * step / total_steps)) / 2`
    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (PI * frac).cos())
    }
}

/// A named mutable parameter handed to [`Sgd::step`].
pub type NamedParam<'a> = (String, &'a mut Tensor);

#[derive(Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// Applies one momentum update at the scheduled learning rate, then clears every gradient.
    ///
    /// All gradients are checked before any parameter is touched, so a missing
    /// gradient leaves the parameter set unchanged.
    pub fn step(&mut self, params: &mut [NamedParam<'_>], step: usize) -> Result<()> {
        if step >= self.cfg.total_steps {
            return Err(Error::Optimizer(format!(
                "step {step} outside schedule of {} steps",
                self.cfg.total_steps
            )));
        }
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }
        let lr = self.cfg.lr_at(step);
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for (name, p) in params.iter_mut() {
            let grad = p.grad().expect("checked above").to_vec();
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            if vel.len() != grad.len() {
                return Err(Error::Optimizer(format!("parameter `{name}` changed shape")));
            }
            for ((w, g), v) in p.data_mut().iter_mut().zip(&grad).zip(vel.iter_mut()) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
            if !p.all_finite() {
                return Err(Error::training("sgd", format!("parameter `{name}` diverged")));
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total: usize) -> SgdConfig {
        SgdConfig {
            total_steps: total,
            ..SgdConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg(1000);
        assert_eq!(c.lr_at(0), 0.01);
        assert!((c.lr_at(500) - 0.005).abs() < 1e-15);
        assert!(c.lr_at(999) < 1e-7);
    }

    #[test]
    fn schedule_is_non_increasing() {
        let c = cfg(337);
        for s in 1..337 {
            assert!(c.lr_at(s) <= c.lr_at(s - 1));
        }
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut opt = Sgd::new(cfg(10)).unwrap();
        let mut a = Tensor::zeros(1, 1).with_grad();
        a.accumulate_grad(&[1.0]).unwrap();
        let mut b = Tensor::zeros(1, 1).with_grad();
        let mut params = vec![("a".to_string(), &mut a), ("gate.b".to_string(), &mut b)];
        match opt.step(&mut params, 0) {
            Err(Error::MissingGrad(name)) => assert_eq!(name, "gate.b"),
            other => panic!("{other:?}"),
        }
        assert_eq!(a.data(), &[0.0]);
    }

    #[test]
    fn momentum_update_and_grad_reset() {
        let mut opt = Sgd::new(cfg(4)).unwrap();
        let mut w = Tensor::new(1, 1, vec![1.0]).unwrap().with_grad();
        w.accumulate_grad(&[2.0]).unwrap();
        opt.step(&mut [("w".to_string(), &mut w)], 0).unwrap();
        assert!((w.data()[0] - (1.0 - 0.01 * 2.0)).abs() < 1e-15);
        assert!(w.grad().is_none());
        w.accumulate_grad(&[2.0]).unwrap();
        opt.step(&mut [("w".to_string(), &mut w)], 1).unwrap();
        let lr1 = cfg(4).lr_at(1);
        let expected = 1.0 - 0.01 * 2.0 - lr1 * (0.9 * 2.0 + 2.0);
        assert!((w.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_step_past_schedule_and_bad_config() {
        let mut opt = Sgd::new(cfg(1)).unwrap();
        let mut w = Tensor::zeros(1, 1);
        w.accumulate_grad(&[1.0]).unwrap();
        assert!(opt.step(&mut [("w".into(), &mut w)], 1).is_err());
        assert!(Sgd::new(SgdConfig { base_lr: 0.0, ..cfg(1) }).is_err());
        assert!(Sgd::new(SgdConfig { batch_size: 0, ..cfg(1) }).is_err());
        assert!(Sgd::new(cfg(0)).is_err());
    }
}
