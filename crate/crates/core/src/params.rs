//! Named parameter storage shared by the backbone, prompt modules and head.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Role of a parameter, used to decide weight-decay eligibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
    Prompt,
}

impl ParamKind {
    /// Decoupled weight decay applies to weights and embeddings only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Embedding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Generator,
    Prompt,
    Head,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub path: String,
    pub kind: ParamKind,
    pub group: ParamGroup,
    /// Accounting bucket, e.g. `W1`, `W2`, `A`, `prompt`, `backbone`.
    pub component: String,
    pub trainable: bool,
    value: Arc<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }
}

/// Ordered collection of parameters; iteration follows registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_path: HashMap<String, ParamId>,
}

pub struct NewParam<'a> {
    pub path: &'a str,
    pub kind: ParamKind,
    pub group: ParamGroup,
    pub component: &'a str,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_path: HashMap::new(),
        }
    }

    pub fn add(&mut self, spec: NewParam<'_>, value: Tensor<T>) -> Result<ParamId> {
        if self.by_path.contains_key(spec.path) {
            return Err(Error::Config(format!("duplicate parameter path {}", spec.path)));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            path: spec.path.to_string(),
            kind: spec.kind,
            group: spec.group,
            component: spec.component.to_string(),
            trainable: true,
            value: Arc::new(value),
        });
        self.by_path.insert(spec.path.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.params[id.0].value)
    }

    /// Mutable access; clones the buffer only if a live tape still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.by_path.get(path).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Number of scalars in parameters of `group`.
    pub fn group_numel(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Snapshot of every value, used for freezing checks and best-epoch restore.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| (*p.value).clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::Contract("snapshot size mismatch".into()));
        }
        for (i, v) in snapshot.iter().enumerate() {
            self.set_value(ParamId(i), v.clone())?;
        }
        Ok(())
    }
}

pub(crate) fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(shape, limit, rng)
}

pub(crate) fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

pub(crate) fn normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}
