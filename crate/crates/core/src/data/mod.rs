//! Task datasets, few-shot subsampling, synthetic tasks and metrics.

mod metrics;
mod sample;
mod synth;
mod tsv;

use serde::{Deserialize, Serialize};

pub use metrics::{accuracy, f1_binary, pearson, spearman, Metric};
pub use sample::few_shot_sample;
pub use synth::{synth_task, SynthKind, SYNTH_LENGTH_NORM, TRIGGER};
pub use tsv::{load_splits, load_tsv, write_tsv, Schema};

use crate::nn::{HeadMode, Target};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskType {
    Single,
    Pair,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: usize,
    pub s1: String,
    pub s2: Option<String>,
    pub label: Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub task_type: TaskType,
    pub objective: HeadMode,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskDataset {
    /// Accuracy (plus binary F1 for two labels) or Pearson and Spearman.
    pub fn metrics(&self) -> Vec<Metric> {
        match self.objective {
            HeadMode::Classification { num_labels: 2 } => vec![Metric::Accuracy, Metric::F1Binary],
            HeadMode::Classification { .. } => vec![Metric::Accuracy],
            HeadMode::Regression => vec![Metric::Pearson, Metric::Spearman],
        }
    }

    /// Metric used for model selection on the dev split.
    pub fn primary_metric(&self) -> Metric {
        self.metrics()[0]
    }

    pub fn all_examples(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// Every sentence, for building a vocabulary.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.train
            .iter()
            .flat_map(|e| std::iter::once(e.s1.as_str()).chain(e.s2.as_deref()))
    }
}

/// Appends a copy of every pair with the two sentences swapped. Copies get
/// fresh ids after the largest existing one.
pub fn swap_pairs_and_concat(examples: &[Example]) -> Vec<Example> {
    let next = examples.iter().map(|e| e.id + 1).max().unwrap_or(0);
    let mut out = examples.to_vec();
    out.extend(examples.iter().enumerate().filter_map(|(k, e)| {
        e.s2.as_ref().map(|s2| Example {
            id: next + k,
            s1: s2.clone(),
            s2: Some(e.s1.clone()),
            label: e.label,
        })
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swap_doubles_pairs() {
        let ex = vec![
            Example {
                id: 0,
                s1: "a".into(),
                s2: Some("b".into()),
                label: Target::Class(1),
            },
            Example {
                id: 3,
                s1: "c".into(),
                s2: Some("d".into()),
                label: Target::Class(0),
            },
        ];
        let out = swap_pairs_and_concat(&ex);
        assert_eq!(out.len(), 4);
        assert_eq!(&out[..2], &ex[..]);
        assert_eq!((out[2].id, out[2].s1.as_str(), out[2].s2.as_deref()), (4, "b", Some("a")));
        assert_eq!((out[3].id, out[3].label), (5, Target::Class(0)));
    }
}
