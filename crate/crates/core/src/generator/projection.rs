use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{self, NewParam, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::phm::PhmLinear;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `y = W x + b[j]` with `W` stored `[out×in]` and a bank of biases.
#[derive(Clone, Debug)]
pub struct DenseLinear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub biases: Vec<ParamId>,
}

impl DenseLinear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        (in_dim, out_dim): (usize, usize),
        num_biases: usize,
        component: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            NewParam {
                path: &format!("{name}.weight"),
                kind: ParamKind::Weight,
                group: ParamGroup::Generator,
                component,
            },
            params::glorot_uniform(&[out_dim, in_dim], in_dim, out_dim, rng),
        )?;
        let biases = (0..num_biases)
            .map(|j| {
                store.add(
                    NewParam {
                        path: &format!("{name}.bias.{j}"),
                        kind: ParamKind::Bias,
                        group: ParamGroup::Generator,
                        component,
                    },
                    Tensor::zeros(&[out_dim]),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            biases,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, bias_index: usize) -> Result<Var> {
        if tape.value(x).numel() != self.in_dim {
            return Err(Error::Dimension {
                op: "dense",
                lhs: vec![self.in_dim],
                rhs: tape.shape(x).to_vec(),
            });
        }
        let b = *self.biases.get(bias_index).ok_or(Error::Index {
            what: "dense bias",
            index: bias_index,
            len: self.biases.len(),
        })?;
        let w = tape.param(store, self.weight);
        let col = tape.reshape(x, &[self.in_dim, 1])?;
        let y = tape.matmul(w, col)?;
        let y = tape.reshape(y, &[self.out_dim])?;
        let b = tape.param(store, b);
        tape.add(y, b)
    }
}

/// A generator projection in either dense or PHM form.
#[derive(Clone, Debug)]
pub enum Projection {
    Dense(DenseLinear),
    Phm(PhmLinear),
}

impl Projection {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, bias_index: usize) -> Result<Var> {
        match self {
            Projection::Dense(l) => l.forward(tape, store, x, bias_index),
            Projection::Phm(l) => l.forward(tape, store, x, bias_index),
        }
    }

    /// Weight parameters (dense matrix or the `Bᵢ` blocks), excluding shared `Aᵢ`.
    pub fn weight_ids(&self) -> Vec<ParamId> {
        match self {
            Projection::Dense(l) => vec![l.weight],
            Projection::Phm(l) => l.b_ids().to_vec(),
        }
    }

    pub fn bias_ids(&self) -> Vec<ParamId> {
        match self {
            Projection::Dense(l) => l.biases.clone(),
            Projection::Phm(l) => l.bias_ids().to_vec(),
        }
    }

    /// Effective `[out×in]` weight matrix.
    pub fn weight_matrix<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        match self {
            Projection::Dense(l) => Ok(store.value(l.weight).clone()),
            Projection::Phm(l) => l.materialize_weight(store),
        }
    }
}
