use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named trainable tensors plus named persistent buffers (batch-norm running
/// statistics). Buffers never receive gradient updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Param>,
    by_name: HashMap<String, Slot>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name, Slot::Param(self.params.len()))?;
        self.params.push(Param { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name, Slot::Buffer(self.buffers.len()))?;
        self.buffers.push(Param { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        match self.by_name.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        match self.by_name.get(name) {
            Some(Slot::Buffer(i)) => Some(BufferId(*i)),
            _ => None,
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn buffers(&self) -> &[Param] {
        &self.buffers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Trainable scalar count.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Trainable plus buffer scalars.
    pub fn total_count(&self) -> usize {
        self.trainable_count() + self.buffers.iter().map(|p| p.value.len()).sum::<usize>()
    }
}
