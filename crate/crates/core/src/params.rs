//! Named parameter collections, binding to a tape, and plain SGD.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which training stage produced a parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Backbone,
    Transformer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S: Scalar = f64> {
    pub value: Tensor<S>,
    pub grad_enabled: bool,
    pub grad: Option<Tensor<S>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMeta {
    pub config_hash: [u8; 32],
    pub stage: Stage,
    pub seed: u64,
}

impl Default for ParamMeta {
    fn default() -> Self {
        Self {
            config_hash: [0; 32],
            stage: Stage::Backbone,
            seed: 0,
        }
    }
}

/// Ordered name → tensor map. Iteration order is the lexical name order,
/// which is also the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams<S: Scalar = f64> {
    entries: BTreeMap<String, Param<S>>,
    pub meta: ParamMeta,
}

impl<S: Scalar> ModelParams<S> {
    pub fn new(meta: ParamMeta) -> Self {
        Self {
            entries: BTreeMap::new(),
            meta,
        }
    }

    /// Adds a trainable entry. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(
            name,
            Param {
                value,
                grad_enabled: true,
                grad: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param<S>> {
        self.entries.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Enables or disables gradients for every entry whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.grad_enabled = trainable;
                if !trainable {
                    p.grad = None;
                }
            }
        }
    }

    /// Registers every entry on `tape`: trainable entries as gradient leaves,
    /// frozen ones as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> BoundParams<'t, S> {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| {
                let v = if p.grad_enabled {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Adds the tape's leaf gradients into each trainable entry's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape<S>, bound: &BoundParams<'_, S>) {
        for (name, p) in self.entries.iter_mut() {
            if !p.grad_enabled {
                continue;
            }
            let Some(var) = bound.vars.get(name) else { continue };
            let Some(g) = tape.grad(*var) else { continue };
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(g),
            }
        }
    }

    /// Multiplies every accumulated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: S) {
        for p in self.entries.values_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm(&self) -> S {
        self.entries
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum::<S>()
            .sqrt()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// `p ← p − lr·grad(p)` for every trainable entry, then clears gradients.
    /// Every trainable entry must have a gradient.
    pub fn sgd_step(&mut self, lr: S) -> Result<()> {
        if let Some((name, _)) = self
            .entries
            .iter()
            .find(|(_, p)| p.grad_enabled && p.grad.is_none())
        {
            return Err(Error::MissingGradient(name.clone()));
        }
        for p in self.entries.values_mut() {
            if let Some(g) = p.grad.take() {
                p.value
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(w, &d)| *w -= lr * d);
            }
        }
        Ok(())
    }
}

/// Tape handles for one [`ModelParams`] binding.
pub struct BoundParams<'t, S: Scalar = f64> {
    vars: BTreeMap<String, Var<'t, S>>,
}

impl<'t, S: Scalar> BoundParams<'t, S> {
    pub fn get(&self, name: &str) -> Result<Var<'t, S>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

/// Free-function form of [`ModelParams::sgd_step`].
pub fn sgd_step<S: Scalar>(params: &mut ModelParams<S>, lr: S) -> Result<()> {
    params.sgd_step(lr)
}
