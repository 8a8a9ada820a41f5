//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{HitError, Result};

/// Ordered set of named parameter tensors.
///
/// Order is insertion order and is what checkpoints and optimizer moments
/// are keyed on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| HitError::Config(format!("unknown parameter `{name}`")))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t, '_> {
        BoundParams {
            store: self,
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Uses already-recorded `vars`, one per stored tensor in store order.
    pub fn bind_vars<'t>(&self, vars: Vec<Var<'t>>) -> Result<BoundParams<'t, '_>> {
        if vars.len() != self.tensors.len() {
            return Err(HitError::dim(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        for (name, (v, t)) in self.names.iter().zip(vars.iter().zip(&self.tensors)) {
            if v.shape() != t.shape() {
                return Err(HitError::dim(format!(
                    "`{name}` bound with shape {:?}, stored {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
        }
        Ok(BoundParams { store: self, vars })
    }

    /// Same as [`bind`](Self::bind) but as constants (no gradients).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundParams<'t, '_> {
        BoundParams {
            store: self,
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

/// Parameters recorded on one tape.
pub struct BoundParams<'t, 's> {
    store: &'s ParamStore,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t, '_> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.store
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| HitError::Config(format!("unknown parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradient of every parameter (zeros where unreachable), in store order.
    pub fn grads(&self, grads: &crate::diffcore::Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are stored per parameter in store
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(HitError::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(HitError::dim(format!(
                    "gradient shape {:?} for parameter of shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, (pi, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *pi -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_replaces_existing() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0));
        s.insert("b", Tensor::scalar(2.0));
        s.insert("a", Tensor::scalar(3.0));
        assert_eq!(s.names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(s.get("a").unwrap().item(), 3.0);
        assert!(s.get("c").is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![1.0, -1.0, 0.5]));
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &s,
        );
        adam.update(&mut s, &[Tensor::vector(vec![2.0, -3.0, 0.0])])
            .unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(vec![3.0, -2.0]));
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &s,
        );
        for _ in 0..500 {
            let tape = Tape::new();
            let b = s.bind(&tape);
            let loss = b.get("x").unwrap().square().sum_all();
            let g = tape.backward(loss);
            let grads = b.grads(&g);
            adam.update(&mut s, &grads).unwrap();
        }
        for v in s.get("x").unwrap().data() {
            assert!(v.abs() < 1e-2, "{v}");
        }
    }
}
