//! JSON checkpoint: a header (format version, dtype, transformer config and
//! free-form metadata) followed by a map from parameter path to
//! `{dtype, shape, values}` with row-major values.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so save/load is bit-exact for finite values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TransformerConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ParamRecord<T> {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub dtype: String,
    pub transformer: TransformerConfig,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: BTreeMap<String, ParamRecord<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_store(
        store: &ParamStore<T>,
        transformer: &TransformerConfig,
        meta: BTreeMap<String, serde_json::Value>,
    ) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (_, p) in store.iter() {
            if !p.value().is_finite() {
                return Err(Error::NonFinite { path: p.path.clone() });
            }
            params.insert(
                p.path.clone(),
                ParamRecord {
                    dtype: T::DTYPE.to_string(),
                    shape: p.value().shape().to_vec(),
                    values: p.value().data().to_vec(),
                },
            );
        }
        Ok(Self {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            transformer: transformer.clone(),
            meta,
            params,
        })
    }

    /// Overwrites every parameter of `store` by path. The checkpoint must
    /// hold exactly the store's parameters with matching shapes and dtype.
    pub fn apply_to(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.check_header()?;
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.path.clone())).collect();
        for (id, path) in ids {
            let rec = self
                .params
                .get(&path)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {path}")))?;
            if rec.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!("{path}: dtype {} != {}", rec.dtype, T::DTYPE)));
            }
            let value = Tensor::new(rec.shape.clone(), rec.values.clone())
                .map_err(|e| Error::Checkpoint(format!("{path}: {e}")))?;
            store.set_value(id, value)?;
        }
        Ok(())
    }

    fn check_header(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint dtype {} does not match {}",
                self.dtype,
                T::DTYPE
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        ck.check_header()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        ck.check_header()?;
        Ok(ck)
    }
}

/// Reads just the dtype field so callers can pick the element type.
pub fn peek_dtype(path: impl AsRef<Path>) -> Result<String> {
    #[derive(Deserialize)]
    struct Header {
        dtype: String,
    }
    let h: Header = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    Ok(h.dtype)
}
