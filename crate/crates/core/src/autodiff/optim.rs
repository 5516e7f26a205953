use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub amsgrad: bool,
}

impl AdamConfig {
    pub fn amsgrad(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            amsgrad: true,
        }
    }

    pub fn adam(lr: f64) -> Self {
        AdamConfig {
            amsgrad: false,
            ..Self::amsgrad(lr)
        }
    }
}

/// Adam moments for one [`ParamStore`], kept in f64.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub v_max: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<T: Real>(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        OptimizerState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros.clone(),
            v_max: zeros,
        }
    }

    /// One update of every trainable parameter; gradients are cleared after.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::invalid("optimizer state does not match parameter store"));
        }
        if let Some(p) = store.iter().find(|p| p.requires_grad && p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let g = p.grad.take().expect("checked above");
            let (m, v, vm) = (&mut self.m[i], &mut self.v[i], &mut self.v_max[i]);
            for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.real_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let second = if c.amsgrad {
                    vm[j] = vm[j].max(v[j]);
                    vm[j]
                } else {
                    v[j]
                };
                let update = c.lr * (m[j] / bc1) / ((second / bc2).sqrt() + c.eps);
                *w = T::from_real(w.real_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    fn quad_step(store: &mut ParamStore<f64>, opt: &mut OptimizerState) {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let w = b.vars()[0];
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let mut g = tape.backward(loss).unwrap();
        store.accumulate(&b, &mut g);
        opt.step(store).unwrap();
    }

    #[test]
    fn one_step_descends() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(&[1], 1.0), true);
        let mut opt = OptimizerState::new(AdamConfig::amsgrad(0.1), &store);
        quad_step(&mut store, &mut opt);
        assert!(store.value(id).data()[0] < 1.0);
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::full(&[1], 1.0), true);
        let mut opt = OptimizerState::new(AdamConfig::amsgrad(0.1), &store);
        assert!(matches!(opt.step(&mut store), Err(Error::MissingGradient(n)) if n == "w"));
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(&[3], vec![3.0, -2.0, 0.5]).unwrap(), true);
        let mut opt = OptimizerState::new(AdamConfig::amsgrad(0.05), &store);
        for _ in 0..500 {
            quad_step(&mut store, &mut opt);
        }
        for &w in store.value(id).data() {
            assert!(w.abs() < 1e-3, "w = {w}");
        }
    }
}
