use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Named, ordered parameter tensors. Order is registration order and is
/// what checkpoints serialize.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    decay: Vec<bool>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            decay: Vec::new(),
        }
    }

    /// Adds a trainable tensor; `decay` marks it for L2 weight decay.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        self.decay.push(decay);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn decays(&self, i: usize) -> bool {
        self.decay[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts parameter `i` on the tape.
    pub fn var(&self, tape: &mut Tape<T>, i: usize) -> Var {
        tape.param(i, &self.tensors[i])
    }

    /// Copies gradients from a tape that has run backward into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) {
        for (i, g) in tape.param_grads() {
            self.tensors[i].accumulate_grad(g);
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Replaces parameter values from `(name, tensor)` pairs, which must
    /// cover the store exactly with matching shapes.
    pub fn load_from(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                entries.len()
            )));
        }
        for (name, t) in entries {
            let i = self
                .index_of(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Shape {
                    op: "load parameter",
                    left: self.tensors[i].shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            self.tensors[i] = t.with_grad();
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            decay: self.decay.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
