use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::eval::{gold_values, predict, prepare_examples, EVAL_BATCH};
use super::optim::{adamw_step, clip_grad_norm, OptimState};
use super::TrainConfig;
use crate::accountant::{audit, AuditReport, MethodSpec};
use crate::data::{Example, Metric, TaskDataset};
use crate::error::{Error, Result};
use crate::generator::{Encoded, IdpgModel, SentenceEncoder};
use crate::nn::{ForwardCtx, Target};
use crate::params::{ParamGroup, ParamId};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Dev metrics; a metric that is undefined for this epoch (for example
    /// a correlation of constant predictions) is NaN.
    pub dev: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, by best dev score.
    pub best_epoch: Option<usize>,
    pub selection_metric: Metric,
    pub audit: Option<AuditReport>,
    pub steps: u64,
}

impl TrainReport {
    pub fn best_dev(&self) -> Option<&BTreeMap<String, f64>> {
        let e = self.best_epoch?;
        self.history.iter().find(|r| r.epoch == e).map(|r| &r.dev)
    }
}

const SHUFFLE_STREAM: u64 = 16;
const DROPOUT_STREAM: u64 = 17;

fn example_loss_and_grads<T: Scalar>(
    model: &IdpgModel<T>,
    enc: &Encoded<T>,
    target: Target,
    dropout_seed: u64,
) -> Result<(f64, Vec<(ParamId, Tensor<T>)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    rng.set_stream(DROPOUT_STREAM);
    let mut ctx = ForwardCtx {
        train: true,
        rng: Some(&mut rng),
    };
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, enc, None, &mut ctx)?;
    let loss = model.loss(&mut tape, &out, target)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            path: "training loss".into(),
        });
    }
    tape.backward(loss)?;
    Ok((value, tape.param_grads()))
}

fn backbone_values<T: Scalar>(model: &IdpgModel<T>) -> Vec<Tensor<T>> {
    model
        .store
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::Backbone)
        .map(|(_, p)| p.value().clone())
        .collect()
}

fn needs_refresh<T: Scalar>(model: &IdpgModel<T>) -> bool {
    let backbone_trains = model
        .store
        .iter()
        .any(|(_, p)| p.group == ParamGroup::Backbone && p.trainable);
    backbone_trains && model.generator().is_some_and(|g| g.config.encoder == SentenceEncoder::BackboneCls)
}

fn dev_scores<T: Scalar>(
    model: &IdpgModel<T>,
    encs: &[Encoded<T>],
    examples: &[Example],
    metrics: &[Metric],
) -> Result<BTreeMap<String, f64>> {
    let preds = predict(model, encs, EVAL_BATCH)?;
    let golds = gold_values(examples);
    let mut out = BTreeMap::new();
    for m in metrics {
        let v = match m.score(&preds, &golds) {
            Ok(v) => v,
            Err(Error::UndefinedMetric(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        out.insert(m.name().to_string(), v);
    }
    Ok(out)
}

/// One log line per epoch, e.g. `epoch=3 train_loss=0.412345 dev_accuracy=0.870000`.
pub fn format_epoch(r: &EpochRecord) -> String {
    let mut line = format!("epoch={} train_loss={:.6}", r.epoch, r.train_loss);
    for (k, v) in &r.dev {
        line.push_str(&format!(" dev_{k}={v:.6}"));
    }
    line
}

/// Trains the trainable parameters of `model` on `ds.train` with AdamW.
///
/// When `spec` is given, the trainable parameter counts must match the
/// accountant before the first step. After every epoch the dev split (if
/// any) is scored; at the end the parameters from the epoch with the best
/// dev score are restored. With `freeze_backbone` the backbone is checked to
/// be bit-identical afterwards.
pub fn train<T: Scalar>(
    model: &mut IdpgModel<T>,
    spec: Option<&MethodSpec>,
    ds: &TaskDataset,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    if model.config.head != ds.objective {
        return Err(Error::Config(format!(
            "model head {:?} does not match task objective {:?}",
            model.config.head, ds.objective
        )));
    }
    if cfg.freeze_backbone {
        model.freeze_backbone(true);
    }
    let audit_report = spec.map(|s| audit(model, s)).transpose()?;
    let frozen_before = cfg.freeze_backbone.then(|| backbone_values(model));

    let metrics = ds.metrics();
    let selection_metric = metrics[0];
    let targets: Vec<Target> = ds.train.iter().map(|e| e.label).collect();
    let refresh = needs_refresh(model);
    let mut train_encs = prepare_examples(model, &ds.train)?;
    let mut dev_encs = prepare_examples(model, &ds.dev)?;

    let n = ds.train.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut state = OptimState::<T>::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor<T>>)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        if refresh && epoch > 1 {
            train_encs = prepare_examples(model, &ds.train)?;
            dev_encs = prepare_examples(model, &ds.dev)?;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let run = |&i: &usize| {
                let dropout_seed = cfg.seed ^ ((epoch as u64) << 40) ^ (i as u64);
                example_loss_and_grads(model, &train_encs[i], targets[i], dropout_seed)
            };
            let results: Vec<_> = if cfg.deterministic {
                batch.iter().map(run).collect::<Result<_>>()?
            } else {
                batch.par_iter().map(run).collect::<Result<_>>()?
            };
            let mut acc: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
            for (loss, grads) in results {
                loss_sum += loss;
                for (id, g) in grads {
                    match acc.get_mut(&id) {
                        Some(a) => {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x = *x + *y;
                            }
                        }
                        None => {
                            acc.insert(id, g);
                        }
                    }
                }
            }
            let scale = T::from_f64(1.0 / batch.len() as f64);
            let mut grads: Vec<(ParamId, Tensor<T>)> = acc
                .into_iter()
                .map(|(id, g)| (id, g.map(|x| x * scale)))
                .collect();
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adamw_step(&mut model.store, &grads, &mut state, cfg, cfg.lr_at(step, total_steps))?;
            step += 1;
        }
        let dev = if ds.dev.is_empty() {
            BTreeMap::new()
        } else {
            dev_scores(model, &dev_encs, &ds.dev, &metrics)?
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            dev,
        };
        writeln!(log, "{}", format_epoch(&record))?;
        if let Some(&score) = record.dev.get(selection_metric.name()) {
            if !score.is_nan() && best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, model.store.snapshot()));
            }
        }
        history.push(record);
    }

    let best_epoch = match best {
        Some((score, epoch, snapshot)) => {
            model.store.restore(&snapshot)?;
            writeln!(log, "best_epoch={epoch} dev_{}={score:.6}", selection_metric.name())?;
            Some(epoch)
        }
        None => None,
    };
    if let Some(before) = frozen_before {
        if backbone_values(model) != before {
            return Err(Error::Contract("frozen backbone changed during training".into()));
        }
    }
    Ok(TrainReport {
        history,
        best_epoch,
        selection_metric,
        audit: audit_report,
        steps: state.step,
    })
}
