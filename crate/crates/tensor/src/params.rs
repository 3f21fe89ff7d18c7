use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::scalar::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimizer (unless its group is frozen).
    Trainable,
    /// State carried alongside parameters, e.g. batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Named tensors partitioned into groups, some of which may be frozen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
    frozen: BTreeSet<String>,
}

/// Tape leaves created for the trainable tensors of a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Contract(format!("parameter `{}` is not bound", name)))
    }
}

/// Builds bindings from explicit `(name, var)` pairs, e.g. when a test puts
/// the parameters on the tape itself.
impl FromIterator<(String, Var)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bindings {
            vars: iter.into_iter().collect(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: &str, group: &str, kind: ParamKind, tensor: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(TensorError::Contract(format!("duplicate parameter `{}`", name)));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group: group.to_string(),
            kind,
            tensor,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entry(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter `{}`", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].tensor),
            None => Err(TensorError::Contract(format!("unknown parameter `{}`", name))),
        }
    }

    pub fn freeze(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
    }

    pub fn unfreeze(&mut self, group: &str) {
        self.frozen.remove(group);
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.contains(group)
    }

    pub fn frozen_groups(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Distinct group names in insertion order.
    pub fn groups(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.group.as_str()) {
                out.push(&e.group);
            }
        }
        out
    }

    pub fn is_trainable(&self, entry: &ParamEntry<T>) -> bool {
        entry.kind == ParamKind::Trainable && !self.frozen.contains(&entry.group)
    }

    /// Registers every non-buffer tensor as a tape leaf. Frozen groups become
    /// constants, so no gradient can ever reach them.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        let mut vars = HashMap::new();
        for e in &self.entries {
            if e.kind == ParamKind::Buffer {
                continue;
            }
            let mut t = e.tensor.clone();
            t.grad = None;
            let v = tape.leaf(t.with_requires_grad(self.is_trainable(e)));
            vars.insert(e.name.clone(), v);
        }
        Bindings { vars }
    }

    /// Registers every non-buffer tensor as a constant, for inference passes.
    pub fn bind_constant(&self, tape: &mut Tape<T>) -> Bindings {
        let mut vars = HashMap::new();
        for e in self.entries.iter().filter(|e| e.kind != ParamKind::Buffer) {
            let mut t = e.tensor.clone();
            t.grad = None;
            vars.insert(e.name.clone(), tape.constant(t));
        }
        Bindings { vars }
    }

    /// Moves gradients from a backward pass into the tensors' grad slots.
    /// Trainable tensors the loss does not depend on receive zeros.
    pub fn store_grads(&mut self, grads: &mut Gradients<T>, bindings: &Bindings) -> Result<()> {
        for i in 0..self.entries.len() {
            let e = &self.entries[i];
            if e.kind == ParamKind::Buffer {
                continue;
            }
            let var = bindings.get(&e.name)?;
            let g = grads.take(var);
            if !self.is_trainable(e) {
                if g.is_some() {
                    return Err(TensorError::Contract(format!(
                        "frozen parameter `{}` received a gradient",
                        e.name
                    )));
                }
                continue;
            }
            let n = e.tensor.numel();
            self.entries[i].tensor.grad = Some(g.unwrap_or_else(|| vec![T::zero(); n]));
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.grad = None);
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group.clone(),
                    kind: e.kind,
                    tensor: e.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
            frozen: self.frozen.clone(),
        }
    }

    /// True when both sets hold the same names, groups, kinds and shapes in the same order.
    pub fn same_layout<U: Real>(&self, other: &ParamSet<U>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.group == b.group && a.kind == b.kind && a.tensor.shape() == b.tensor.shape()
            })
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}
