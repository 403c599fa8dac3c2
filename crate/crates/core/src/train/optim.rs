use std::collections::BTreeMap;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// First and second moments per parameter, created on first update.
#[derive(Clone, Debug, Default)]
pub struct OptimState<T> {
    pub step: u64,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(&id).map(|(m, v)| (m, v))
    }
}

/// Fails on the first non-finite gradient entry, naming its parameter.
pub fn check_grads<T: Scalar>(store: &ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
    for (id, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                path: format!("gradient of {}", store.get(*id).path),
            });
        }
    }
    Ok(())
}

/// One bias-corrected Adam step with decoupled weight decay:
/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`, where the decay term applies only to
/// parameters whose kind decays. Every gradient must belong to a trainable
/// parameter.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut OptimState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    check_grads(store, grads)?;
    for (id, g) in grads {
        let p = store.get(*id);
        if !p.trainable {
            return Err(Error::Contract(format!("gradient supplied for frozen parameter {}", p.path)));
        }
        if p.value().shape() != g.shape() {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: p.value().shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (id, g) in grads {
        let decay = if store.get(*id).kind.decays() {
            cfg.weight_decay
        } else {
            0.0
        };
        let (m, v) = state
            .moments
            .entry(*id)
            .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        let value = store.value_mut(*id);
        for (((w, &gi), mi), vi) in value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi.as_f64();
            let m1 = b1 * mi.as_f64() + (1.0 - b1) * gi;
            let v1 = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
            *mi = T::from_f64(m1);
            *vi = T::from_f64(v1);
            let step = (m1 / c1) / ((v1 / c2).sqrt() + eps) + decay * w.as_f64();
            *w = T::from_f64(w.as_f64() - lr * step);
        }
    }
    Ok(())
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{NewParam, ParamGroup, ParamKind};

    fn store_with(kind: ParamKind, value: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .add(
                NewParam {
                    path: "p",
                    kind,
                    group: ParamGroup::Generator,
                    component: "W1",
                },
                Tensor::scalar(value),
            )
            .unwrap();
        (s, id)
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let (mut s, id) = store_with(ParamKind::Weight, 0.75);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut st = OptimState::new();
        for _ in 0..3 {
            adamw_step(&mut s, &[(id, Tensor::scalar(0.0))], &mut st, &cfg, 1e-2).unwrap();
        }
        assert_eq!(s.value(id).data()[0], 0.75);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let (mut s, id) = store_with(ParamKind::Weight, 0.0);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut st = OptimState::new();
        adamw_step(&mut s, &[(id, Tensor::scalar(1.0))], &mut st, &cfg, 1e-3).unwrap();
        let expect = -1e-3 / (1.0 + 1e-6);
        assert!((s.value(id).data()[0] - expect).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn bias_is_not_decayed() {
        let cfg = TrainConfig::default();
        let (mut s, id) = store_with(ParamKind::Bias, 2.0);
        let mut st = OptimState::new();
        adamw_step(&mut s, &[(id, Tensor::scalar(0.0))], &mut st, &cfg, 0.1).unwrap();
        assert_eq!(s.value(id).data()[0], 2.0);

        let (mut s, id) = store_with(ParamKind::Weight, 2.0);
        let mut st = OptimState::new();
        adamw_step(&mut s, &[(id, Tensor::scalar(0.0))], &mut st, &cfg, 0.1).unwrap();
        assert!((s.value(id).data()[0] - (2.0 - 0.1 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = store_with(ParamKind::Weight, 0.0);
        let err = adamw_step(
            &mut s,
            &[(id, Tensor::scalar(f64::NAN))],
            &mut OptimState::new(),
            &TrainConfig::default(),
            0.1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("gradient of p"), "{err}");
    }

    #[test]
    fn frozen_parameter_rejected() {
        let (mut s, id) = store_with(ParamKind::Weight, 0.0);
        s.set_group_trainable(ParamGroup::Generator, false);
        let r = adamw_step(
            &mut s,
            &[(id, Tensor::scalar(1.0))],
            &mut OptimState::new(),
            &TrainConfig::default(),
            0.1,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![(ParamId(0), Tensor::vector(vec![3.0f64, 4.0]))];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-15);
    }
}
