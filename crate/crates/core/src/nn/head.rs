use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{self, NewParam, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    Classification { num_labels: usize },
    Regression,
}

impl HeadMode {
    pub fn outputs(self) -> usize {
        match self {
            HeadMode::Classification { num_labels } => num_labels,
            HeadMode::Regression => 1,
        }
    }
}

/// Supervision target for one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Real(f64),
}

/// `softmax(W h_CLS + b)` for classification, `W h_CLS + b` for regression.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub mode: HeadMode,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ClassifierHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        hidden: usize,
        mode: HeadMode,
        rng: &mut R,
    ) -> Result<Self> {
        let labels = mode.outputs();
        if labels == 0 {
            return Err(Error::Config("classifier needs at least one label".into()));
        }
        let weight = store.add(
            NewParam {
                path: "head/weight",
                kind: ParamKind::Weight,
                group: ParamGroup::Head,
                component: "head",
            },
            params::glorot_uniform(&[labels, hidden], hidden, labels, rng),
        )?;
        let bias = store.add(
            NewParam {
                path: "head/bias",
                kind: ParamKind::Bias,
                group: ParamGroup::Head,
                component: "head",
            },
            Tensor::zeros(&[labels]),
        )?;
        Ok(Self { mode, weight, bias })
    }

    /// Log-probabilities `[num_labels]` or a raw `[1]` regression output.
    pub fn classify<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h_cls: Var) -> Result<Var> {
        let d = tape.value(h_cls).numel();
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let col = tape.reshape(h_cls, &[d, 1])?;
        let logits = tape.matmul(w, col)?;
        let logits = tape.reshape(logits, &[self.mode.outputs()])?;
        let logits = tape.add(logits, b)?;
        match self.mode {
            HeadMode::Classification { .. } => tape.log_softmax(logits),
            HeadMode::Regression => Ok(logits),
        }
    }

    /// Cross-entropy on log-probabilities, squared error on regression output.
    pub fn loss<T: Scalar>(&self, tape: &mut Tape<T>, output: Var, target: Target) -> Result<Var> {
        match (self.mode, target) {
            (HeadMode::Classification { num_labels }, Target::Class(c)) => {
                if c >= num_labels {
                    return Err(Error::Index {
                        what: "class label",
                        index: c,
                        len: num_labels,
                    });
                }
                let lp = tape.pick(output, c)?;
                Ok(tape.scale(lp, -T::one()))
            }
            (HeadMode::Regression, Target::Real(y)) => {
                let target = tape.constant(Tensor::scalar(T::from_f64(y)));
                let diff = tape.sub(output, target)?;
                tape.mul(diff, diff)
            }
            (mode, target) => Err(Error::Contract(format!(
                "target {target:?} does not match head mode {mode:?}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_head_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let head = ClassifierHead::new(&mut store, 4, HeadMode::Classification { num_labels: 3 }, &mut rng).unwrap();
        store.set_value(head.weight, Tensor::zeros(&[3, 4])).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]));
        let out = head.classify(&mut tape, &store, h).unwrap();
        for &v in tape.value(out).data() {
            assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn regression_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let head = ClassifierHead::new(&mut store, 3, HeadMode::Regression, &mut rng).unwrap();
        store
            .set_value(head.weight, Tensor::from_rows(&[&[1.0, 0.0, 0.0]]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::vector(vec![0.75, 9.0, -4.0]));
        let out = head.classify(&mut tape, &store, h).unwrap();
        assert_eq!(tape.value(out).data(), &[0.75]);
    }

    #[test]
    fn mismatched_target_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let head = ClassifierHead::new(&mut store, 2, HeadMode::Regression, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let out = head.classify(&mut tape, &store, h).unwrap();
        assert!(head.loss(&mut tape, out, Target::Class(0)).is_err());
    }
}
