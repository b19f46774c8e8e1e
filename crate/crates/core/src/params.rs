//! Named parameter storage and per-graph binding.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use crate::error::Error;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which tower a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Used by both towers (backbone, input embedding).
    Shared,
    /// Used only on the inference path.
    Student,
    /// Used only to build the teacher path.
    Teacher,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub role: Role,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool, role: Role) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name '{name}'");
        self.params.push(Param {
            name,
            value,
            trainable,
            role,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(i, _)| i).collect()
    }

    pub fn frozen(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.trainable).map(|(i, _)| i).collect()
    }

    /// Number of scalar coordinates across the given parameters.
    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&i| self.value(i).len()).sum()
    }

    /// Hash over names, shapes and value bits of the given parameters.
    pub fn checksum(&self, ids: &[ParamId]) -> u64 {
        let mut h = DefaultHasher::new();
        for &id in ids {
            let p = self.get(id);
            h.write(p.name.as_bytes());
            for &d in p.value.shape() {
                h.write_usize(d);
            }
            for v in p.value.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub fn frozen_checksum(&self) -> u64 {
        self.checksum(&self.frozen())
    }

    /// Replaces the value of a named parameter, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<(), Error> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Model(format!("unknown parameter '{name}'")))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(crate::error::CheckpointError::ParamShape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: value.shape().to_vec(),
            }
            .into());
        }
        *slot = value;
        Ok(())
    }
}

/// Lazily places parameters on a graph, each at most once.
///
/// Trainable parameters become gradient-tracking leaves; frozen ones become
/// constants, so gradients flow through them but never accumulate on them.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
        }
    }

    pub fn bind(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if p.trainable {
            g.param(p.value.clone())
        } else {
            g.constant(p.value.clone())
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Uses an existing graph node for `id` instead of binding its stored value.
    pub fn preset(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binder_reuses_vars_and_respects_trainability() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::scalar(2.0), true, Role::Student);
        let b = s.add("b", Tensor::scalar(3.0), false, Role::Shared);
        let mut g = Graph::new();
        let mut bind = Binder::new(&s);
        let va = bind.bind(&mut g, a);
        assert_eq!(bind.bind(&mut g, a), va);
        let vb = bind.bind(&mut g, b);
        let y = g.mul(va, vb).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(va).unwrap().item(), 3.0);
        assert!(grads.get(vb).is_none());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::matrix(1, 2, vec![1.0, 2.0]), false, Role::Shared);
        let before = s.frozen_checksum();
        s.assign("w", Tensor::matrix(1, 2, vec![1.0, 2.5])).unwrap();
        assert_ne!(before, s.frozen_checksum());
        assert!(s.assign("w", Tensor::scalar(1.0)).is_err());
    }
}
