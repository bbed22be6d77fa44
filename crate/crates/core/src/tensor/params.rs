use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape};
use super::Tensor;
use crate::error::{Error, Result};

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Temporal encoders, positional tables and the fusion map.
    Temporal,
    /// Learnable prompt context.
    Prompt,
    /// Label-fusion MLP.
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Tensor,
    pub group: ParamGroup,
    #[serde(skip)]
    pub grad: Option<Tensor>,
}

/// Named learnable tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    params: IndexMap<String, Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        self.params.insert(
            name.to_string(),
            Parameter {
                value,
                group,
                grad: None,
            },
        );
        Ok(())
    }

    /// Registers a parameter drawn from a normal distribution truncated at
    /// two standard deviations.
    pub fn insert_trunc_normal(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        self.insert(name, group, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> Result<()> {
        self.insert(name, group, Tensor::zeros(shape))
    }

    pub fn insert_full(&mut self, name: &str, group: ParamGroup, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, group, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<Option<&Tensor>> {
        Ok(self.get(name)?.grad.as_ref())
    }

    /// Sets every gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn clear_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Adds `weight ×` the tape gradient of every bound parameter into its
    /// gradient buffer.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients, weight: f64) -> Result<()> {
        for (name, var) in tape.bindings() {
            let Some(g) = grads.get(var) else { continue };
            let p = self.get_mut(name)?;
            let buf = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for (acc, v) in buf.data_mut().iter_mut().zip(g) {
                *acc += weight * v;
            }
        }
        Ok(())
    }

    /// Global L2 norm over all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            let f = max_norm / norm;
            for g in self.params.values_mut().filter_map(|p| p.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|v| *v *= f);
            }
        }
        norm
    }

    /// `p ← p − lr·grad(p)` for every parameter, then zeroes the gradients.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        self.sgd_step_grouped(|_| lr)
    }

    /// SGD with a learning rate chosen per parameter group.
    pub fn sgd_step_grouped(&mut self, lr: impl Fn(ParamGroup) -> f64) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }
        for p in self.params.values_mut() {
            let rate = lr(p.group);
            let grad = p.grad.as_mut().expect("checked above");
            for (v, g) in p.value.data_mut().iter_mut().zip(grad.data_mut()) {
                *v -= rate * *g;
                *g = 0.0;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }

    pub fn total_len(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}
