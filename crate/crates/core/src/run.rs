//! Config-file driven experiments: task loading, model construction,
//! training, evaluation and checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountant::{Method, MethodSpec};
use crate::data::{few_shot_sample, load_splits, synth_task, Example, Metric, Schema, SynthKind, TaskDataset, TaskType};
use crate::error::{Error, Result};
use crate::generator::{EmbeddingTable, IdpgModel, ModelConfig};
use crate::nn::checkpoint::peek_dtype;
use crate::nn::{ForwardCtx, HeadMode, TransformerConfig, Vocab};
use crate::tensor::{Scalar, Tape};
use crate::train::{evaluate, train, Precision, TrainConfig, TrainReport};

fn default_synth_size() -> usize {
    500
}

/// Where the examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSource {
    Synth {
        kind: SynthKind,
        #[serde(default = "default_synth_size")]
        size: usize,
        /// Generation seed; the training seed when absent.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// A directory with `train.tsv`, `dev.tsv` and optionally `test.tsv`.
    Tsv {
        dir: PathBuf,
        #[serde(default)]
        name: Option<String>,
        task_type: TaskType,
        objective: HeadMode,
    },
}

impl TaskSource {
    pub fn load(&self, default_seed: u64) -> Result<TaskDataset> {
        match self {
            TaskSource::Synth { kind, size, seed } => Ok(synth_task(*kind, *size, seed.unwrap_or(default_seed))),
            TaskSource::Tsv {
                dir,
                name,
                task_type,
                objective,
            } => {
                let name = match name {
                    Some(n) => n.clone(),
                    None => dir
                        .file_name()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "task".into()),
                };
                let schema = Schema {
                    task_type: *task_type,
                    objective: *objective,
                };
                load_splits(dir, &name, schema)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub method: Method,
    /// Missing `d` and `layers` are taken from `transformer`.
    #[serde(default)]
    pub dims: crate::accountant::Dims,
    #[serde(default)]
    pub transformer: TransformerConfig,
    /// Word-vector file for bag-of-vectors sentence encoders.
    #[serde(default)]
    pub embedding_table: Option<PathBuf>,
}

impl ModelSection {
    /// Method spec with dimensions completed from the backbone config.
    pub fn spec(&self, table: Option<&EmbeddingTable>) -> MethodSpec {
        let mut dims = self.dims.clone();
        dims.d.get_or_insert(self.transformer.hidden);
        dims.layers.get_or_insert(self.transformer.num_layers);
        if self.method == Method::FullFinetune {
            dims.backbone_params.get_or_insert(self.transformer.param_count() as u64);
        }
        if let (Method::MIdpgPhmGlove, Some(t)) = (self.method, table) {
            dims.enc_dim.get_or_insert(t.dim());
        }
        MethodSpec {
            method: self.method,
            dims,
        }
    }

    pub fn load_table(&self) -> Result<Option<EmbeddingTable>> {
        self.embedding_table.as_ref().map(EmbeddingTable::load).transpose()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// JSON run summary.
    pub summary: Option<PathBuf>,
}

/// Subsample the training split before training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotSection {
    pub k: usize,
    pub dev_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSource,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub few_shot: Option<FewShotSection>,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The task as trained on: loaded, then subsampled if `few_shot` is set.
    pub fn load_task(&self) -> Result<TaskDataset> {
        let ds = self.task.load(self.train.seed)?;
        match self.few_shot {
            Some(fs) => few_shot_sample(&ds, fs.k, fs.dev_size, self.train.seed),
            None => Ok(ds),
        }
    }
}

/// A model of either element type.
#[derive(Clone, Debug)]
pub enum AnyModel {
    F32(IdpgModel<f32>),
    F64(IdpgModel<f64>),
}

macro_rules! with_model {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            AnyModel::F32($m) => $body,
            AnyModel::F64($m) => $body,
        }
    };
}

fn cls_vector<T: Scalar>(model: &IdpgModel<T>, sentence: &str) -> Result<Vec<f64>> {
    let enc = model.prepare(sentence, None)?;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &enc, None, &mut ForwardCtx::eval())?;
    Ok(tape.value(out.cls).to_f64_vec())
}

impl AnyModel {
    /// Builds `section`'s method for `ds` with a vocabulary from its
    /// training sentences.
    pub fn build(section: &ModelSection, ds: &TaskDataset, precision: Precision, seed: u64) -> Result<(Self, MethodSpec)> {
        let table = section.load_table()?;
        let spec = section.spec(table.as_ref());
        let vocab = Vocab::build(ds.texts(), section.transformer.vocab_size)?;
        let tc = &section.transformer;
        let model = match precision {
            Precision::F32 => AnyModel::F32(spec.build_model(tc, ds.objective, vocab, table, seed)?),
            Precision::F64 => AnyModel::F64(spec.build_model(tc, ds.objective, vocab, table, seed)?),
        };
        Ok((model, spec))
    }

    /// Loads a checkpoint in whichever element type it was saved with.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match peek_dtype(path)?.as_str() {
            "f32" => Ok(AnyModel::F32(IdpgModel::load(path)?)),
            "f64" => Ok(AnyModel::F64(IdpgModel::load(path)?)),
            other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        with_model!(self, m => m.save(path))
    }

    pub fn checkpoint_json(&self) -> Result<String> {
        with_model!(self, m => m.checkpoint()?.to_json())
    }

    pub fn precision(&self) -> Precision {
        match self {
            AnyModel::F32(_) => Precision::F32,
            AnyModel::F64(_) => Precision::F64,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        with_model!(self, m => &m.config)
    }

    pub fn train(&mut self, spec: Option<&MethodSpec>, ds: &TaskDataset, cfg: &TrainConfig, log: &mut dyn std::io::Write) -> Result<TrainReport> {
        with_model!(self, m => train(m, spec, ds, cfg, log))
    }

    pub fn evaluate(&self, examples: &[Example], metrics: &[Metric]) -> Result<BTreeMap<String, f64>> {
        with_model!(self, m => evaluate(m, examples, metrics))
    }

    /// Final-layer position-0 state for `sentence` encoded alone, with the
    /// model's prompts (if any) active.
    pub fn cls_vector(&self, sentence: &str) -> Result<Vec<f64>> {
        with_model!(self, m => cls_vector(m, sentence))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: String,
    pub method: Method,
    pub precision: Precision,
    pub seed: u64,
    pub lr: f64,
    /// Trainable scalars outside the head, as audited before training.
    pub trainable_params: u64,
    pub best_epoch: Option<usize>,
    pub steps: u64,
    pub selection_metric: String,
    pub train: BTreeMap<String, f64>,
    pub dev: BTreeMap<String, f64>,
    pub test: BTreeMap<String, f64>,
}

pub struct RunOutcome {
    pub model: AnyModel,
    pub summary: RunSummary,
    /// The epoch log, one line per epoch plus the selection line.
    pub log: String,
}

/// Trains the configured method on the configured task, scores every
/// non-empty split and writes the requested outputs.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutcome> {
    let ds = cfg.load_task()?;
    run_on(cfg, &ds)
}

fn run_on(cfg: &RunConfig, ds: &TaskDataset) -> Result<RunOutcome> {
    let (mut model, spec) = AnyModel::build(&cfg.model, ds, cfg.train.precision, cfg.train.seed)?;
    let mut log = Vec::new();
    let report = model.train(Some(&spec), ds, &cfg.train, &mut log)?;
    let metrics = ds.metrics();
    let score = |split: &[Example]| -> Result<BTreeMap<String, f64>> {
        if split.is_empty() {
            Ok(BTreeMap::new())
        } else {
            model.evaluate(split, &metrics)
        }
    };
    let summary = RunSummary {
        task: ds.name.clone(),
        method: spec.method,
        precision: cfg.train.precision,
        seed: cfg.train.seed,
        lr: cfg.train.lr,
        trainable_params: report.audit.as_ref().map_or(0, |a| a.total),
        best_epoch: report.best_epoch,
        steps: report.steps,
        selection_metric: report.selection_metric.name().to_string(),
        train: score(&ds.train)?,
        dev: score(&ds.dev)?,
        test: score(&ds.test)?,
    };
    let log = String::from_utf8(log).expect("log lines are UTF-8");
    let out = &cfg.output;
    if let Some(p) = &out.checkpoint {
        model.save(p)?;
    }
    if let Some(p) = &out.log {
        fs::write(p, &log)?;
    }
    if let Some(p) = &out.summary {
        fs::write(p, serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(RunOutcome { model, summary, log })
}

/// Runs `cfg` once per learning rate (outputs disabled) and returns the
/// outcomes in grid order.
pub fn lr_sweep(cfg: &RunConfig, grid: &[f64]) -> Result<Vec<RunOutcome>> {
    let ds = cfg.load_task()?;
    grid.iter()
        .map(|&lr| {
            let mut c = cfg.clone();
            c.train.lr = lr;
            c.output = OutputSection::default();
            run_on(&c, &ds)
        })
        .collect()
}

/// Index of the outcome with the best dev selection score; NaN and
/// missing scores never win, ties keep the earlier entry.
pub fn best_by_dev(outcomes: &[RunOutcome]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in outcomes.iter().enumerate() {
        let Some(&s) = o.summary.dev.get(&o.summary.selection_metric) else {
            continue;
        };
        if !s.is_nan() && best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub k: usize,
    pub metric: String,
    /// Test score per seed, in seed order.
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single seed.
    pub stdev: f64,
}

pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// For every `k` and seed: sample `k` training and `dev_size` dev examples
/// with that seed, train with that seed and score the primary metric on
/// the test split. The full task is loaded once with the config's seed.
pub fn few_shot_sweep(cfg: &RunConfig, ks: &[usize], seeds: &[u64], dev_size: usize) -> Result<Vec<FewShotRow>> {
    let full = cfg.task.load(cfg.train.seed)?;
    let metric = full.primary_metric();
    ks.iter()
        .map(|&k| {
            let scores = seeds
                .iter()
                .map(|&seed| {
                    let ds = few_shot_sample(&full, k, dev_size, seed)?;
                    if ds.test.is_empty() {
                        return Err(Error::Empty(format!("test split of {}", ds.name)));
                    }
                    let mut c = cfg.clone();
                    c.train.seed = seed;
                    c.output = OutputSection::default();
                    let (mut model, spec) = AnyModel::build(&c.model, &ds, c.train.precision, seed)?;
                    model.train(Some(&spec), &ds, &c.train, &mut std::io::sink())?;
                    Ok(model.evaluate(&ds.test, &[metric])?[metric.name()])
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, stdev) = mean_stdev(&scores);
            Ok(FewShotRow {
                k,
                metric: metric.name().to_string(),
                scores,
                mean,
                stdev,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_toml(extra: &str) -> String {
        format!(
            r#"
[task]
source = "synth"
kind = "keyword-presence"
size = 60

[model]
method = "m-idpg-phm"
dims = {{ m = 8, t = 2, n = 2 }}
transformer = {{ hidden = 8, heads = 2, ffn_inner = 16, vocab_size = 40, max_seq = 16 }}

[train]
epochs = 2
lr = 0.005
{extra}
"#
        )
    }

    #[test]
    fn toml_parses_and_round_trips() {
        let cfg = RunConfig::from_toml(&toy_toml("precision = 64")).unwrap();
        assert_eq!(cfg.train.precision, Precision::F64);
        assert_eq!(cfg.model.spec(None).dims.d, Some(8));
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert!(RunConfig::from_toml(&toy_toml("bogus = 1")).is_err());
    }

    #[test]
    fn run_writes_outputs_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::from_toml(&toy_toml("")).unwrap();
        cfg.output = OutputSection {
            checkpoint: Some(dir.path().join("m.json")),
            log: Some(dir.path().join("train.log")),
            summary: Some(dir.path().join("summary.json")),
        };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.summary.trainable_params, crate::accountant::count(&cfg.model.spec(None)).unwrap().total);
        assert_eq!(fs::read_to_string(dir.path().join("train.log")).unwrap(), out.log);
        assert!(out.summary.test.contains_key("accuracy"));
        let loaded = AnyModel::load(dir.path().join("m.json")).unwrap();
        assert_eq!(loaded.precision(), Precision::F32);
        let ds = cfg.load_task().unwrap();
        assert_eq!(
            loaded.evaluate(&ds.test, &ds.metrics()).unwrap(),
            out.model.evaluate(&ds.test, &ds.metrics()).unwrap()
        );
    }

    #[test]
    fn sample_stdev() {
        let (m, s) = mean_stdev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stdev(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn few_shot_rows_per_k() {
        let cfg = RunConfig::from_toml(&toy_toml("")).unwrap();
        let rows = few_shot_sweep(&cfg, &[4, 8], &[0, 1], 4).unwrap();
        assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![4, 8]);
        assert!(rows.iter().all(|r| r.scores.len() == 2 && r.metric == "accuracy"));
        assert!(matches!(few_shot_sweep(&cfg, &[100], &[0], 0), Err(Error::Size(_))));
    }

    #[test]
    fn lr_sweep_picks_best_dev() {
        let cfg = RunConfig::from_toml(&toy_toml("")).unwrap();
        let outs = lr_sweep(&cfg, &[0.0, 5e-3]).unwrap();
        assert_eq!(outs.len(), 2);
        let best = best_by_dev(&outs).unwrap();
        let score = |i: usize| outs[i].summary.dev["accuracy"];
        assert!(score(best) >= score(1 - best));
    }
}
