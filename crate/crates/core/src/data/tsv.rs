//! Tab-separated task files: `label <TAB> s1 [<TAB> s2]`, one example per
//! line, `#` lines ignored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Example, TaskDataset, TaskType};
use crate::error::{Error, Result};
use crate::nn::{HeadMode, Target};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub task_type: TaskType,
    pub objective: HeadMode,
}

fn parse_label(field: &str, objective: HeadMode, line: usize) -> Result<Target> {
    match objective {
        HeadMode::Classification { num_labels } => {
            let c: usize = field.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("label {field:?} is not a class index"),
            })?;
            if c >= num_labels {
                return Err(Error::Parse {
                    line,
                    msg: format!("label {c} outside 0..{num_labels}"),
                });
            }
            Ok(Target::Class(c))
        }
        HeadMode::Regression => {
            let y: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("label {field:?} is not a number"),
            })?;
            if !y.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: "label is not finite".into(),
                });
            }
            Ok(Target::Real(y))
        }
    }
}

/// Parses TSV text; ids are `first_id, first_id + 1, ...` in line order.
pub(crate) fn parse_tsv(text: &str, schema: Schema, first_id: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.starts_with('#') || raw.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        let want = match schema.task_type {
            TaskType::Single => 2,
            TaskType::Pair => 3,
        };
        if cols.len() != want {
            return Err(Error::Schema(format!(
                "line {line}: expected {want} tab-separated columns for a {:?} task, found {}",
                schema.task_type,
                cols.len()
            )));
        }
        out.push(Example {
            id: first_id + out.len(),
            label: parse_label(cols[0], schema.objective, line)?,
            s1: cols[1].to_string(),
            s2: cols.get(2).map(|s| s.to_string()),
        });
    }
    Ok(out)
}

/// Loads one file as the training split of a dataset named after it.
pub fn load_tsv(path: impl AsRef<Path>, schema: Schema) -> Result<TaskDataset> {
    let path = path.as_ref();
    let train = parse_tsv(&fs::read_to_string(path)?, schema, 0)?;
    Ok(TaskDataset {
        name: path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        task_type: schema.task_type,
        objective: schema.objective,
        train,
        dev: Vec::new(),
        test: Vec::new(),
    })
}

/// Loads `train.tsv`, `dev.tsv` and (if present) `test.tsv` from `dir`.
/// Ids continue across files so the splits never share one.
pub fn load_splits(dir: impl AsRef<Path>, name: &str, schema: Schema) -> Result<TaskDataset> {
    let dir = dir.as_ref();
    let mut next = 0;
    let mut read = |file: &str, required: bool| -> Result<Vec<Example>> {
        let p = dir.join(file);
        if !required && !p.exists() {
            return Ok(Vec::new());
        }
        let ex = parse_tsv(&fs::read_to_string(&p)?, schema, next)?;
        next += ex.len();
        Ok(ex)
    };
    Ok(TaskDataset {
        name: name.to_string(),
        task_type: schema.task_type,
        objective: schema.objective,
        train: read("train.tsv", true)?,
        dev: read("dev.tsv", true)?,
        test: read("test.tsv", false)?,
    })
}

/// Writes examples in the format read by [`load_tsv`].
pub fn write_tsv(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let mut out = String::new();
    for e in examples {
        let texts = std::iter::once(&e.s1).chain(e.s2.as_ref());
        for t in texts.clone() {
            if t.contains(['\t', '\n', '\r']) {
                return Err(Error::Schema(format!("example {}: text contains a tab or newline", e.id)));
            }
        }
        match e.label {
            Target::Class(c) => out.push_str(&c.to_string()),
            Target::Real(y) => out.push_str(&y.to_string()),
        }
        for t in texts {
            out.push('\t');
            out.push_str(t);
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
