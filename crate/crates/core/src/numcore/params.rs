use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Which part of the model a parameter belongs to. Tapes and optimizers
/// select parameters by group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    /// Item, feedback and user embeddings/encoders and the behavior projection.
    Embedding,
    /// Activation unit of the state representation network.
    StateNet,
    Actor,
    Critic,
    /// Target copies; never differentiated.
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Owns every learnable tensor of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    groups: Vec<Group>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, tensor: Tensor) -> ParamId {
        self.tensors.push(tensor.detached());
        self.names.push(name.into());
        self.groups.push(group);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a `rows x cols` parameter drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: Group,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        let t = Tensor::new(rows, cols, data).expect("positive dimensions");
        self.add(name, group, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.groups[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn ids_in(&self, groups: &[Group]) -> Vec<ParamId> {
        self.ids()
            .filter(|id| groups.contains(&self.group(*id)))
            .collect()
    }

    /// Number of scalar values in the given parameters.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.get(*id).len()).sum()
    }

    /// Drops the gradient slots of the given parameters.
    pub fn clear_grads(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.tensors[id.0].clear_grad();
        }
    }

    /// `target <- tau * online + (1 - tau) * target` for each pair.
    pub fn soft_update(&mut self, pairs: &[(ParamId, ParamId)], tau: f64) -> Result<()> {
        for &(online, target) in pairs {
            let (so, st) = (self.get(online).shape(), self.get(target).shape());
            if so != st {
                return Err(Error::ShapeMismatch {
                    op: "soft_update",
                    left: so,
                    right: st,
                });
            }
        }
        for &(online, target) in pairs {
            let src = self.tensors[online.0].data().to_vec();
            let dst = self.tensors[target.0].data_mut();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = tau * s + (1.0 - tau) * *d;
            }
        }
        Ok(())
    }

    /// Copies values of `online` into `target` for each pair.
    pub fn hard_update(&mut self, pairs: &[(ParamId, ParamId)]) -> Result<()> {
        self.soft_update(pairs, 1.0)
    }

    /// Bitwise snapshot of the given parameter values.
    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<Vec<u64>> {
        ids.iter()
            .map(|id| self.get(*id).data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }
}
