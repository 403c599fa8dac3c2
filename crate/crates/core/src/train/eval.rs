use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{Example, Metric};
use crate::error::{Error, Result};
use crate::generator::{Encoded, IdpgModel};
use crate::nn::{ForwardCtx, HeadMode, Target};
use crate::tensor::{Scalar, Tape};

/// Tokenizes every example and computes its sentence representation.
pub fn prepare_examples<T: Scalar>(model: &IdpgModel<T>, examples: &[Example]) -> Result<Vec<Encoded<T>>> {
    examples
        .par_iter()
        .map(|e| model.prepare(&e.s1, e.s2.as_deref()))
        .collect()
}

/// Class index (argmax, lowest index on ties) or the regression output of
/// one forward pass, optionally padded to `pad_to` tokens.
pub fn predict_one<T: Scalar>(model: &IdpgModel<T>, enc: &Encoded<T>, pad_to: Option<usize>) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, enc, pad_to, &mut ForwardCtx::eval())?;
    let v = tape.value(out.output).data();
    Ok(match model.config.head {
        HeadMode::Regression => v[0].as_f64(),
        HeadMode::Classification { .. } => {
            let mut best = 0;
            for (i, x) in v.iter().enumerate() {
                if *x > v[best] {
                    best = i;
                }
            }
            best as f64
        }
    })
}

/// Batched inference: each batch is padded to its longest member with
/// `[PAD]` tokens that attention ignores.
pub fn predict<T: Scalar>(model: &IdpgModel<T>, encs: &[Encoded<T>], batch_size: usize) -> Result<Vec<f64>> {
    let batch_size = batch_size.max(1);
    let per_batch: Vec<Vec<f64>> = encs
        .par_chunks(batch_size)
        .map(|batch| {
            let longest = batch.iter().map(|e| e.input.ids.len()).max().unwrap_or(0);
            batch.iter().map(|e| predict_one(model, e, Some(longest))).collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_batch.into_iter().flatten().collect())
}

pub(crate) fn gold_values(examples: &[Example]) -> Vec<f64> {
    examples
        .iter()
        .map(|e| match e.label {
            Target::Class(c) => c as f64,
            Target::Real(y) => y,
        })
        .collect()
}

pub(crate) fn score_all(metrics: &[Metric], preds: &[f64], golds: &[f64]) -> Result<BTreeMap<String, f64>> {
    metrics
        .iter()
        .map(|m| Ok((m.name().to_string(), m.score(preds, golds)?)))
        .collect()
}

pub const EVAL_BATCH: usize = 32;

/// Scores the model on `examples` with the given metrics.
pub fn evaluate<T: Scalar>(
    model: &IdpgModel<T>,
    examples: &[Example],
    metrics: &[Metric],
) -> Result<BTreeMap<String, f64>> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let encs = prepare_examples(model, examples)?;
    let preds = predict(model, &encs, EVAL_BATCH)?;
    score_all(metrics, &preds, &gold_values(examples))
}
