//! Named parameter sets and the Adam optimizer.

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered, named collection of tensors owned by a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor and return its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Put every tensor on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Gradients for bound vars, zero-filled where nothing flowed.
    pub fn collect_grads(&self, vars: &[Var<'_>], grads: &Gradients) -> Vec<Tensor> {
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    }

    /// Replace all tensors from `(name, tensor)` pairs, checking names and shapes.
    pub fn load_from(&mut self, entries: &[(String, Tensor)], prefix: &str) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let (_, src) = entries
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{key}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{key}` has shape {:?} in checkpoint, model expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.iter()
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            v: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    /// One bias-corrected update.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("{prefix}m.{i}"), m.clone()));
            out.push((format!("{prefix}v.{i}"), v.clone()));
        }
        out
    }

    pub fn load_from(&mut self, entries: &[(String, Tensor)], prefix: &str, t: u64) -> Result<()> {
        for (i, (m, v)) in self.m.iter_mut().zip(self.v.iter_mut()).enumerate() {
            for (slot, key) in [(m, format!("{prefix}m.{i}")), (v, format!("{prefix}v.{i}"))] {
                let (_, src) = entries.iter().find(|(n, _)| *n == key).ok_or_else(|| {
                    Error::Config(format!("checkpoint lacks optimizer state `{key}`"))
                })?;
                if src.shape() != slot.shape() {
                    return Err(Error::Config(format!(
                        "optimizer state `{key}` has wrong shape"
                    )));
                }
                *slot = src.clone();
            }
        }
        self.t = t;
        Ok(())
    }
}
