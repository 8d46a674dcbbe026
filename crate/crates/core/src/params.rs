//! Persistent model parameters.
//!
//! A [`ParamStore`] owns every learned tensor of a model together with an
//! accumulated gradient buffer. Tapes bind parameters to leaves per training
//! step; after `backward`, [`ParamStore::absorb_grads`] copies the step's
//! gradients back into the store where the optimizer reads them.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Learning-rate group. `Features` covers the feature-map transform that
/// stands in for the backbone; everything else is `Head`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Features,
    Head,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param {
            name,
            group,
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Register a tensor initialized uniformly in [-1/√fan_in, +1/√fan_in].
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, group, Tensor::new(shape, data).unwrap())
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Bind a parameter as a tape leaf for this step.
    pub fn leaf(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.leaf_param(self.params[id.0].value.clone(), id)
    }

    /// Add the tape's leaf gradients into the store buffers.
    pub fn absorb_grads(&mut self, tape: &Tape) {
        for (id, g) in tape.param_grads() {
            let buf = self.params[id.0].grad.data_mut();
            for (d, s) in buf.iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Replace a parameter value; shape must match. Used by checkpoint load
    /// and by tests that pin specific weights.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.params[id.0].value.shape() {
            return Err(Error::shape(
                "set_value",
                self.params[id.0].value.shape(),
                value.shape(),
            ));
        }
        self.params[id.0].value = value;
        Ok(())
    }
}
