//! Small synthetic tasks whose labels are simple functions of the tokens.

use std::collections::HashSet;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, TaskDataset, TaskType};
use crate::error::{Error, Result};
use crate::nn::{HeadMode, Target};

/// Token whose presence makes a keyword-presence example positive.
pub const TRIGGER: &str = "zap";

/// Length-regression targets are `words / SYNTH_LENGTH_NORM`.
pub const SYNTH_LENGTH_NORM: usize = 64;

const FILLER: usize = 10;
const MAX_LEN_REGRESSION: usize = 40;
/// Pair-overlap sentences hold `PAIR_WORDS` distinct words out of `PAIR_VOCAB`.
const PAIR_VOCAB: usize = 6;
const PAIR_WORDS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    KeywordPresence,
    PairOverlap,
    LengthRegression,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [
        SynthKind::KeywordPresence,
        SynthKind::PairOverlap,
        SynthKind::LengthRegression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::KeywordPresence => "keyword-presence",
            SynthKind::PairOverlap => "pair-overlap",
            SynthKind::LengthRegression => "length-regression",
        }
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown synthetic task {s:?}")))
    }
}

fn filler(i: usize) -> String {
    format!("w{i:02}")
}

fn jaccard(a: &str, b: &str) -> f64 {
    let sa: HashSet<&str> = a.split_whitespace().collect();
    let sb: HashSet<&str> = b.split_whitespace().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

fn keyword_example(rng: &mut ChaCha8Rng) -> (String, Option<String>, Target) {
    let len = rng.random_range(3..=10);
    let mut ws: Vec<String> = (0..len).map(|_| filler(rng.random_range(0..FILLER))).collect();
    let positive = rng.random_bool(0.5);
    if positive {
        let at = rng.random_range(0..len);
        ws[at] = TRIGGER.to_string();
    }
    (ws.join(" "), None, Target::Class(positive as usize))
}

/// Positives reorder the words of `s1`; negatives use exactly the words
/// missing from `s1`. Both classes therefore see the same word distribution
/// and only the overlap separates them.
fn overlap_example(rng: &mut ChaCha8Rng) -> (String, Option<String>, Target) {
    let mut pool: Vec<usize> = (0..PAIR_VOCAB).collect();
    pool.shuffle(rng);
    let s1 = &pool[..PAIR_WORDS];
    let mut s2 = if rng.random_bool(0.5) {
        s1.to_vec()
    } else {
        pool[PAIR_WORDS..].to_vec()
    };
    s2.shuffle(rng);
    let join = |v: &[usize]| v.iter().map(|&i| filler(i)).collect::<Vec<_>>().join(" ");
    let (a, b) = (join(s1), join(&s2));
    let label = (jaccard(&a, &b) > 0.5) as usize;
    (a, Some(b), Target::Class(label))
}

fn length_example(rng: &mut ChaCha8Rng) -> (String, Option<String>, Target) {
    let len = rng.random_range(1..=MAX_LEN_REGRESSION);
    let s: Vec<String> = (0..len).map(|_| filler(rng.random_range(0..FILLER))).collect();
    (s.join(" "), None, Target::Real(len as f64 / SYNTH_LENGTH_NORM as f64))
}

/// Generates `size` examples split 60/20/20 into train/dev/test.
pub fn synth_task(kind: SynthKind, size: usize, seed: u64) -> TaskDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<Example> = (0..size)
        .map(|id| {
            let (s1, s2, label) = match kind {
                SynthKind::KeywordPresence => keyword_example(&mut rng),
                SynthKind::PairOverlap => overlap_example(&mut rng),
                SynthKind::LengthRegression => length_example(&mut rng),
            };
            Example { id, s1, s2, label }
        })
        .collect();
    let n_train = size * 6 / 10;
    let n_dev = size * 2 / 10;
    let test = all.split_off(n_train + n_dev);
    let dev = all.split_off(n_train);
    let (task_type, objective) = match kind {
        SynthKind::KeywordPresence => (TaskType::Single, HeadMode::Classification { num_labels: 2 }),
        SynthKind::PairOverlap => (TaskType::Pair, HeadMode::Classification { num_labels: 2 }),
        SynthKind::LengthRegression => (TaskType::Single, HeadMode::Regression),
    };
    TaskDataset {
        name: kind.name().to_string(),
        task_type,
        objective,
        train: all,
        dev,
        test,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_labels_follow_trigger() {
        let ds = synth_task(SynthKind::KeywordPresence, 200, 1);
        for e in ds.all_examples() {
            let has = e.s1.split_whitespace().any(|w| w == TRIGGER);
            assert_eq!(e.label, Target::Class(has as usize));
        }
        let pos = ds.all_examples().filter(|e| e.label == Target::Class(1)).count();
        assert!((60..140).contains(&pos));
    }

    #[test]
    fn identical_pair_is_positive() {
        assert_eq!(jaccard("a b c", "c b a"), 1.0);
        assert!(jaccard("a b c d", "a b c e") > 0.5);
        assert_eq!(jaccard("a b", "c d"), 0.0);
        let ds = synth_task(SynthKind::PairOverlap, 300, 2);
        for e in ds.all_examples() {
            let j = jaccard(&e.s1, e.s2.as_ref().unwrap());
            assert_eq!(e.label, Target::Class((j > 0.5) as usize));
            assert_eq!(e.s1.split_whitespace().count(), PAIR_WORDS);
        }
        let pos = ds.all_examples().filter(|e| e.label == Target::Class(1)).count();
        assert!((90..210).contains(&pos));
    }

    #[test]
    fn length_target_is_count_over_norm() {
        let ds = synth_task(SynthKind::LengthRegression, 100, 3);
        for e in ds.all_examples() {
            let n = e.s1.split_whitespace().count();
            assert_eq!(e.label, Target::Real(n as f64 / 64.0));
        }
        let ten = (0..10).map(|_| "w01").collect::<Vec<_>>().join(" ");
        assert_eq!(ten.split_whitespace().count() as f64 / SYNTH_LENGTH_NORM as f64, 10.0 / 64.0);
    }

    #[test]
    fn splits_and_determinism() {
        let a = synth_task(SynthKind::PairOverlap, 100, 9);
        assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (60, 20, 20));
        assert_eq!(a.test[0].id, 80);
        assert_eq!(a, synth_task(SynthKind::PairOverlap, 100, 9));
        assert_ne!(a, synth_task(SynthKind::PairOverlap, 100, 10));
    }

    #[test]
    fn kind_names_parse() {
        for k in SynthKind::ALL {
            assert_eq!(k.name().parse::<SynthKind>().unwrap(), k);
        }
        assert!("nope".parse::<SynthKind>().is_err());
    }
}
