//! Named parameter storage, trainability groups and the per-forward
//! binding of parameters onto a tape.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ParamGroup {
    /// Embeddings, attention, FFN, norms and head. Frozen after pretraining.
    Backbone,
    /// Modality projectors.
    Projector,
    /// MoME experts and routers.
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replaces a parameter's value by name, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::assign",
                format!(
                    "`{name}` expects {:?}, got {:?}",
                    p.value.shape(),
                    value.shape()
                ),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn names(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.name.to_string())
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values of every
    /// parameter in `group`, in storage order.
    pub fn group_hash(&self, group: ParamGroup) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Set of parameter groups that receive gradients in a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub backbone: bool,
    pub projector: bool,
    pub adapter: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        backbone: false,
        projector: false,
        adapter: false,
    };
    pub const PRETRAIN: Trainable = Trainable {
        backbone: true,
        projector: true,
        adapter: false,
    };
    pub const ADAPTERS: Trainable = Trainable {
        backbone: false,
        projector: true,
        adapter: true,
    };
    pub const ALL: Trainable = Trainable {
        backbone: true,
        projector: true,
        adapter: true,
    };

    pub fn contains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Projector => self.projector,
            ParamGroup::Adapter => self.adapter,
        }
    }
}

/// One forward pass: a fresh tape plus a lazy parameter → leaf binding, so
/// each parameter appears once and its gradient accumulates across uses.
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: Trainable,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, trainable: Trainable) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self
            .tape
            .leaf(p.value.clone(), self.trainable.contains(p.group));
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }
}

/// Uniform `±bound` initialization.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Normal initialization with standard deviation `std`.
pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_is_shared_and_respects_groups() {
        let mut s = ParamStore::new();
        let a = s.add("a", ParamGroup::Backbone, Tensor::vector(vec![1.0, 2.0]));
        let b = s.add("b", ParamGroup::Adapter, Tensor::vector(vec![3.0, 4.0]));
        let mut g = Graph::new(&s, Trainable::ADAPTERS);
        let va = g.param(a);
        assert_eq!(va, g.param(a));
        let vb = g.param(b);
        let p = g.tape.mul(va, vb).unwrap();
        let q = g.tape.mul(p, vb).unwrap();
        let l = g.tape.sum(q);
        g.tape.backward(l).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, b);
        // d/db sum(a b^2) = 2 a b
        assert_eq!(grads[0].1.data(), &[6.0, 16.0]);
    }

    #[test]
    fn group_hash_tracks_values() {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamGroup::Backbone, Tensor::vector(vec![1.0]));
        s.add("x", ParamGroup::Adapter, Tensor::vector(vec![1.0]));
        let h0 = s.group_hash(ParamGroup::Backbone);
        s.assign("x", Tensor::vector(vec![2.0])).unwrap();
        assert_eq!(h0, s.group_hash(ParamGroup::Backbone));
        s.value_mut(id).data_mut()[0] = 1.5;
        assert_ne!(h0, s.group_hash(ParamGroup::Backbone));
        assert!(s.assign("w", Tensor::vector(vec![1.0, 2.0])).is_err());
    }
}
