use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::rng::Rng;
use super::tape::{Gradients, Tape, Var};
use super::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Optimizer parameter group; each group gets its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    /// Uniform in `[-b, b]` with `b = gain * sqrt(3 / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
}

struct Entry {
    name: String,
    tensor: Tensor,
    group: ParamGroup,
    trainable: bool,
}

/// Named parameters and non-trainable buffers (batch-norm running stats).
///
/// Initial values come from a stream derived from `(seed, name)`, so a
/// parameter's initialization does not depend on registration order.
pub struct ParamStore {
    seed: u64,
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, shape: &[usize], init: Init, group: ParamGroup, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("parameter `{name}` has zero extent {shape:?}")));
        }
        let n = numel(shape);
        let mut rng = Rng::new(self.seed).split(name);
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => (0..n).map(|_| rng.normal() * std).collect(),
            Init::FanIn { fan_in, gain } => {
                let b = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.uniform_range(-b, b)).collect()
            }
        };
        let mut tensor = Tensor::new(shape, data)?;
        tensor.requires_grad = trainable;
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            group,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, group: ParamGroup) -> Result<ParamId> {
        self.insert(name, shape, init, group, true)
    }

    pub fn add_buffer(&mut self, name: &str, shape: &[usize], init: Init, group: ParamGroup) -> Result<ParamId> {
        self.insert(name, shape, init, group, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(move |id| self.get_mut(id))
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Binds a parameter to the tape (once per tape).
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        tape.bind_param(id, &e.tensor, e.trainable)
    }

    /// Adds the gradients of every bound trainable parameter into its `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, grads: &Gradients) {
        for (id, var) in tape.bound_params() {
            if !self.entries[id.0].trainable {
                continue;
            }
            if let Some(g) = grads.wrt(var) {
                self.entries[id.0].tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Copies values from another store with identical names and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .by_name(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", e.name)))?;
            if src.shape() != e.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    e.name,
                    src.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
