use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::checkpoint::Checkpoint;
use super::tape::{Gradients, Tape};
use super::tensor::{lit, Real, Tensor};
use super::Var;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

/// Named parameters of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

/// Tape variables for every parameter of a store, in [`ParamId`] order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, requires_grad: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: None,
            requires_grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// He-style normal init with standard deviation `sqrt(2 / fan_in)`.
    pub fn add_he<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.add_normal(name, shape, std, rng)
    }

    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let t = Tensor::from_fn(shape, |_| lit(std * rng.sample::<f64, _>(StandardNormal)));
        self.add(name, t, true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape), true)
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, lit(value)), true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Record every parameter as a leaf; frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), p.requires_grad))
                .collect(),
        )
    }

    /// Record every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.params.iter().map(|p| tape.constant(p.value.clone())).collect())
    }

    /// Add the tape gradients into each parameter's slot.
    pub fn accumulate(&mut self, bound: &Bound, grads: &mut Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(bound.vars()) {
            if !p.requires_grad {
                continue;
            }
            if let Some(g) = grads.take(v) {
                match &mut p.grad {
                    Some(existing) => {
                        for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    pub fn export(&self, prefix: &str, ckpt: &mut Checkpoint)
    where
        T: Real,
    {
        for p in &self.params {
            ckpt.push(format!("{prefix}{}", p.name), p.value.cast());
        }
    }

    /// Overwrite values from `ckpt`; every parameter must be present with a
    /// matching shape.
    pub fn import(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for p in &mut self.params {
            let key = format!("{prefix}{}", p.name);
            let t = ckpt
                .get(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {key}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "tensor {key}: shape {:?} in checkpoint, {:?} expected",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full(&[3], 2.0), true);
        let b = store.add("b", Tensor::full(&[3], 5.0), false);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let prod = tape.mul(bound[a], bound[b]).unwrap();
        let loss = tape.sum(prod);
        let mut grads = tape.backward(loss).unwrap();
        store.accumulate(&bound, &mut grads);
        assert_eq!(store.get(a).grad.as_ref().unwrap().data(), &[5.0; 3]);
        assert!(store.get(b).grad.is_none());
    }
}
