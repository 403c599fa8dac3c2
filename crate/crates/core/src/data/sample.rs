use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Example, TaskDataset};
use crate::error::{Error, Result};
use crate::nn::Target;

/// Draws a `k`-example training set and a `dev_size` dev set from `ds.train`.
///
/// The training pool is shuffled under `seed`. Classification draws one
/// example per class in label order, cycling until `k` are taken, so class
/// counts differ by at most one while every class has examples left. The
/// dev set is the next `dev_size` shuffled examples not already taken.
/// The original dev split (or test split, when present) becomes the test
/// split of the result.
pub fn few_shot_sample(ds: &TaskDataset, k: usize, dev_size: usize, seed: u64) -> Result<TaskDataset> {
    if k + dev_size > ds.train.len() {
        return Err(Error::Size(format!(
            "few-shot sample needs {k} + {dev_size} examples, training split has {}",
            ds.train.len()
        )));
    }
    let mut pool: Vec<&Example> = ds.train.iter().collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut taken = vec![false; pool.len()];
    let mut train = Vec::with_capacity(k);
    let stratify = pool.iter().all(|e| matches!(e.label, Target::Class(_)));
    if stratify {
        let mut by_class: BTreeMap<usize, std::collections::VecDeque<usize>> = BTreeMap::new();
        for (i, e) in pool.iter().enumerate() {
            if let Target::Class(c) = e.label {
                by_class.entry(c).or_default().push_back(i);
            }
        }
        while train.len() < k {
            for queue in by_class.values_mut() {
                if train.len() == k {
                    break;
                }
                if let Some(i) = queue.pop_front() {
                    taken[i] = true;
                    train.push(pool[i].clone());
                }
            }
        }
    } else {
        for (i, e) in pool.iter().take(k).enumerate() {
            taken[i] = true;
            train.push((*e).clone());
        }
    }
    let dev = pool
        .iter()
        .zip(&taken)
        .filter(|(_, &t)| !t)
        .take(dev_size)
        .map(|(e, _)| (*e).clone())
        .collect();
    Ok(TaskDataset {
        name: format!("{}-k{k}-s{seed}", ds.name),
        task_type: ds.task_type,
        objective: ds.objective,
        train,
        dev,
        test: if ds.test.is_empty() {
            ds.dev.clone()
        } else {
            ds.test.clone()
        },
    })
}
