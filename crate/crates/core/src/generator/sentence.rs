//! Sentence representations `M(x)` fed to the generator.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Backbone, ForwardCtx};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepSource {
    BackboneCls,
    BagOfVectors,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceRep<T> {
    pub vector: Tensor<T>,
    pub source: RepSource,
}

/// Final-layer position-0 state of the bare input (no prompts), computed
/// in eval mode on a private tape.
pub fn encode_backbone_cls<T: Scalar>(backbone: &Backbone, store: &ParamStore<T>, ids: &[usize]) -> Result<SentenceRep<T>> {
    let mut tape = Tape::new();
    let state = backbone.encode(&mut tape, store, ids, &mut ForwardCtx::eval())?;
    Ok(SentenceRep {
        vector: tape.value(state.cls).clone(),
        source: RepSource::BackboneCls,
    })
}

/// Word-vector lookup table. Ordered so serialization is stable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    /// Adds or replaces a word's vector.
    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dimension {
                op: "embedding table",
                lhs: vec![self.dim],
                rhs: vec![vector.len()],
            });
        }
        self.vectors.insert(word.into(), vector);
        Ok(())
    }

    /// Parses `token v1 v2 ... v_dim` lines. The first line fixes the
    /// dimension; a repeated token keeps its last vector.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: Option<Self> = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let values = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|e| Error::Parse {
                        line: line_no,
                        msg: format!("bad float {f:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let t = table.get_or_insert_with(|| Self::new(values.len()));
            if values.is_empty() || values.len() != t.dim {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {} values, found {}", t.dim, values.len()),
                });
            }
            t.vectors.insert(word.to_string(), values);
        }
        table.ok_or(Error::Parse {
            line: 0,
            msg: "embedding table is empty".into(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }
}

/// Mean of the words' vectors. Words missing from the table count as zero
/// vectors but still count towards the divisor.
pub fn encode_bag_of_vectors<T: Scalar>(words: &[String], table: &EmbeddingTable) -> Result<SentenceRep<T>> {
    if words.is_empty() {
        return Err(Error::Empty("bag-of-vectors encoder got no tokens".into()));
    }
    let mut sum = vec![0.0; table.dim()];
    for w in words {
        if let Some(v) = table.get(w) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
        }
    }
    let k = words.len() as f64;
    Ok(SentenceRep {
        vector: Tensor::from_fn(&[table.dim()], |i| T::from_f64(sum[i] / k)),
        source: RepSource::BagOfVectors,
    })
}

/// Read-mostly cache of sentence representations keyed by
/// `(dataset, example id)`.
#[derive(Debug, Default)]
pub struct RepCache<T> {
    map: RwLock<HashMap<(String, usize), Tensor<T>>>,
}

impl<T: Scalar> RepCache<T> {
    pub fn new() -> Self {
        Self {
            map: RwLock::new(HashMap::new()),
        }
    }

    pub fn get(&self, dataset: &str, id: usize) -> Option<Tensor<T>> {
        self.map
            .read()
            .expect("rep cache poisoned")
            .get(&(dataset.to_string(), id))
            .cloned()
    }

    /// Returns the cached value or computes and stores it.
    pub fn get_or_compute(
        &self,
        dataset: &str,
        id: usize,
        compute: impl FnOnce() -> Result<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        if let Some(v) = self.get(dataset, id) {
            return Ok(v);
        }
        let v = compute()?;
        let mut map = self.map.write().expect("rep cache poisoned");
        Ok(map.entry((dataset.to_string(), id)).or_insert(v).clone())
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("rep cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
