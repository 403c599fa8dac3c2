//! Exact trainable-parameter budgets for parameter-efficient fine-tuning
//! methods, and audits of live models against them.
//!
//! Counts exclude the classification head. Display strings use binary
//! units (`K = 1024`, `M = 1024²`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{
    ArchVariant, Depth, EmbeddingTable, Flavor, GeneratorConfig, IdpgModel, InputSource, ModelConfig, Nonlinearity,
    PromptConfig, PromptPosition, SentenceEncoder, Sharing,
};
use crate::nn::{HeadMode, TransformerConfig, Vocab};
use crate::params::ParamGroup;
use crate::tensor::Scalar;

/// Full fine-tuning size of the reference large backbone, a label only.
pub const REFERENCE_BACKBONE_PARAMS: u64 = 355_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    FullFinetune,
    Adapter,
    Compacter,
    PromptTuning,
    #[serde(rename = "prompt-tuning-134")]
    PromptTuning134,
    #[serde(rename = "p-tuning-v2")]
    PTuningV2,
    SIdpgPhm,
    SIdpgDnn,
    MIdpgPhmGlove,
    MIdpgPhm,
    MIdpgDnn,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::FullFinetune,
        Method::Adapter,
        Method::Compacter,
        Method::PromptTuning,
        Method::PromptTuning134,
        Method::PTuningV2,
        Method::SIdpgPhm,
        Method::SIdpgDnn,
        Method::MIdpgPhmGlove,
        Method::MIdpgPhm,
        Method::MIdpgDnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FullFinetune => "full-finetune",
            Method::Adapter => "adapter",
            Method::Compacter => "compacter",
            Method::PromptTuning => "prompt-tuning",
            Method::PromptTuning134 => "prompt-tuning-134",
            Method::PTuningV2 => "p-tuning-v2",
            Method::SIdpgPhm => "s-idpg-phm",
            Method::SIdpgDnn => "s-idpg-dnn",
            Method::MIdpgPhmGlove => "m-idpg-phm-glove",
            Method::MIdpgPhm => "m-idpg-phm",
            Method::MIdpgDnn => "m-idpg-dnn",
        }
    }

    /// Methods that can be built as a live model in this crate.
    pub fn is_constructible(self) -> bool {
        !matches!(self, Method::Adapter | Method::Compacter)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Dimensions a method may need; unused ones are ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    /// Backbone width `d`.
    pub d: Option<usize>,
    /// Transformer layers `N`.
    pub layers: Option<usize>,
    /// Bottleneck width `m`.
    pub m: Option<usize>,
    /// Prompt length `t`.
    pub t: Option<usize>,
    /// PHM factor `n`.
    pub n: Option<usize>,
    /// Sentence-encoder width for word-vector inputs.
    pub enc_dim: Option<usize>,
    pub adapters_per_layer: Option<usize>,
    /// Full fine-tuning count, taken from the backbone configuration.
    pub backbone_params: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub dims: Dims,
}

/// How a count is rendered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unit {
    Raw,
    K(usize),
    M(usize),
    /// A decimal label that is not derived from the count.
    Label(&'static str),
}

fn render(count: u64, unit: Unit) -> String {
    fn trim(s: String) -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    }
    match unit {
        Unit::Raw => count.to_string(),
        Unit::K(dp) => format!("{}K", trim(format!("{:.*}", dp, count as f64 / 1024.0))),
        Unit::M(dp) => format!("{}M", trim(format!("{:.*}", dp, count as f64 / 1_048_576.0))),
        Unit::Label(s) => s.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub label: String,
    pub count: u64,
    pub display: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub method: Method,
    pub components: Vec<Component>,
    pub total: u64,
    /// Rendered total in the convention of the method's derivation.
    pub display: String,
    /// Rendered total as it appears in the summary table.
    pub table_display: String,
}

fn need(v: Option<usize>, method: Method, name: &str) -> Result<usize> {
    match v {
        Some(x) if x > 0 => Ok(x),
        Some(_) => Err(Error::Config(format!("{method}: {name} must be >= 1"))),
        None => Err(Error::Config(format!("{method}: missing dimension {name}"))),
    }
}

fn divides(n: usize, v: usize, method: Method, what: &str) -> Result<()> {
    if !v.is_multiple_of(n) {
        return Err(Error::Config(format!("{method}: n={n} must divide {what}={v}")));
    }
    Ok(())
}

impl MethodSpec {
    /// Dimensions of the reference large-model setting.
    pub fn reference(method: Method) -> Self {
        let mut dims = Dims {
            d: Some(1024),
            ..Dims::default()
        };
        match method {
            Method::FullFinetune => dims.backbone_params = Some(REFERENCE_BACKBONE_PARAMS),
            Method::Adapter => {
                dims.m = Some(16);
                dims.layers = Some(24);
                dims.adapters_per_layer = Some(2);
            }
            Method::Compacter => {
                dims.m = Some(16);
                dims.n = Some(4);
                dims.layers = Some(24);
                dims.adapters_per_layer = Some(2);
            }
            Method::PromptTuning => dims.t = Some(5),
            Method::PromptTuning134 => dims.t = Some(134),
            Method::PTuningV2 => {
                dims.t = Some(5);
                dims.layers = Some(24);
            }
            Method::SIdpgPhm => {
                dims.m = Some(256);
                dims.t = Some(5);
                dims.n = Some(16);
            }
            Method::SIdpgDnn => {
                dims.m = Some(256);
                dims.t = Some(5);
            }
            Method::MIdpgPhmGlove => {
                dims.m = Some(16);
                dims.t = Some(5);
                dims.n = Some(4);
                dims.layers = Some(24);
                dims.enc_dim = Some(300);
            }
            Method::MIdpgPhm => {
                dims.m = Some(16);
                dims.t = Some(5);
                dims.n = Some(16);
                dims.layers = Some(24);
            }
            Method::MIdpgDnn => {
                dims.m = Some(16);
                dims.t = Some(5);
                dims.layers = Some(24);
            }
        }
        Self { method, dims }
    }

    /// Generator configuration of an IDPG method (`None` otherwise).
    pub fn generator_config(&self) -> Result<Option<GeneratorConfig>> {
        let method = self.method;
        let dims = &self.dims;
        let (flavor, depth, encoder, input_source) = match method {
            Method::SIdpgPhm => (
                Flavor::Phm {
                    n: need(dims.n, method, "n")?,
                },
                Depth::Single,
                SentenceEncoder::BackboneCls,
                InputSource::Layer0,
            ),
            Method::SIdpgDnn => (Flavor::Dnn, Depth::Single, SentenceEncoder::BackboneCls, InputSource::Layer0),
            Method::MIdpgPhm => (
                Flavor::Phm {
                    n: need(dims.n, method, "n")?,
                },
                Depth::Multi,
                SentenceEncoder::BackboneCls,
                InputSource::PreviousLayer,
            ),
            Method::MIdpgPhmGlove => (
                Flavor::Phm {
                    n: need(dims.n, method, "n")?,
                },
                Depth::Multi,
                SentenceEncoder::BagOfVectors {
                    dim: need(dims.enc_dim, method, "enc_dim")?,
                },
                InputSource::Layer0,
            ),
            Method::MIdpgDnn => (Flavor::Dnn, Depth::Multi, SentenceEncoder::BackboneCls, InputSource::PreviousLayer),
            _ => return Ok(None),
        };
        Ok(Some(GeneratorConfig {
            flavor,
            prompt_len: need(dims.t, method, "t")?,
            hidden: need(dims.m, method, "m")?,
            model_dim: need(dims.d, method, "d")?,
            depth,
            sharing: Sharing::M,
            input_source,
            encoder,
            arch: ArchVariant::Plain,
            nonlinearity: Nonlinearity::Tanh,
        }))
    }

    /// Prompt configuration of a constructible method, and whether its
    /// backbone stays frozen.
    pub fn prompt_config(&self) -> Result<(PromptConfig, bool)> {
        let t = || need(self.dims.t, self.method, "t");
        Ok(match self.method {
            Method::FullFinetune => (PromptConfig::None, false),
            Method::PromptTuning | Method::PromptTuning134 => (
                PromptConfig::Static {
                    prompt_len: t()?,
                    deep: false,
                },
                true,
            ),
            Method::PTuningV2 => (
                PromptConfig::Static {
                    prompt_len: t()?,
                    deep: true,
                },
                true,
            ),
            Method::Adapter | Method::Compacter => {
                return Err(Error::Config(format!("{} is counted only, not constructible", self.method)))
            }
            _ => (PromptConfig::Generator(self.generator_config()?.expect("IDPG method")), true),
        })
    }
}

impl MethodSpec {
    /// Builds a live model for a constructible method on `transformer`,
    /// whose width and depth must match the spec's `d` and `layers`.
    pub fn build_model<T: Scalar>(
        &self,
        transformer: &TransformerConfig,
        head: HeadMode,
        vocab: Vocab,
        table: Option<EmbeddingTable>,
        seed: u64,
    ) -> Result<IdpgModel<T>> {
        if self.dims.d.is_some_and(|d| d != transformer.hidden) {
            return Err(Error::Config(format!(
                "{}: d={:?} but backbone hidden={}",
                self.method, self.dims.d, transformer.hidden
            )));
        }
        if self.dims.layers.is_some_and(|l| l != transformer.num_layers) {
            return Err(Error::Config(format!(
                "{}: layers={:?} but backbone has {}",
                self.method, self.dims.layers, transformer.num_layers
            )));
        }
        let (prompt, frozen) = self.prompt_config()?;
        let config = ModelConfig {
            transformer: transformer.clone(),
            head,
            prompt,
            position: PromptPosition::Pos0,
        };
        let mut model = IdpgModel::new(config, vocab, table, seed)?;
        model.freeze_backbone(frozen);
        Ok(model)
    }
}

/// Component counts of any generator configuration over `num_layers`
/// layers: `W1` (down), `W2` (up), `A` (PHM sets) and `arch` extras.
pub fn generator_components(cfg: &GeneratorConfig, num_layers: usize) -> Result<Vec<(&'static str, u64)>> {
    cfg.validate(num_layers)?;
    let (t, m, d, e) = (
        cfg.prompt_len as u64,
        cfg.hidden as u64,
        cfg.model_dim as u64,
        cfg.enc_dim() as u64,
    );
    let sets = cfg.num_sets(num_layers) as u64;
    let ub = cfg.up_biases(num_layers) as u64;
    let (div, a_per_set) = match cfg.flavor {
        Flavor::Dnn => (1, 0),
        Flavor::Phm { n } => (n as u64, cfg.a_pools_per_set() as u64 * (n as u64).pow(3)),
    };
    let w1 = sets * (e * m / div + m);
    let w2 = sets * (m * t * d / div + ub * t * d);
    let mut out = vec![("W1", w1), ("W2", w2)];
    if a_per_set > 0 {
        out.push(("A", sets * a_per_set));
    }
    let residual_map = match cfg.arch {
        ArchVariant::Residual | ArchVariant::ResidualLayerNorm if e != d => e * d + d,
        _ => 0,
    };
    let norms = match cfg.arch {
        ArchVariant::Plain | ArchVariant::Residual => 0,
        ArchVariant::LayerNorm => 2 * d,
        ArchVariant::ResidualLayerNorm => 6 * d,
    };
    if residual_map + norms > 0 {
        out.push(("arch", residual_map + norms));
    }
    Ok(out)
}

/// Rendering of each component and of the total, per method.
fn units(method: Method, label: &str, count: u64) -> Unit {
    use Method::*;
    match (method, label) {
        (FullFinetune, _) if count == REFERENCE_BACKBONE_PARAMS => Unit::Label("355M"),
        (FullFinetune, _) => Unit::Raw,
        (Adapter, "total") => Unit::M(2),
        (SIdpgDnn, "total") => Unit::M(1),
        (SIdpgDnn, _) => Unit::K(2),
        (Adapter | Compacter, _) => Unit::K(2),
        (SIdpgPhm, "W1") => Unit::K(2),
        (MIdpgPhmGlove, "W1" | "A") => Unit::Raw,
        _ => Unit::K(0),
    }
}

/// Table rendering, which rounds Compacter to whole K.
fn table_unit(method: Method, total: u64) -> Unit {
    match method {
        Method::Compacter => Unit::K(0),
        m => units(m, "total", total),
    }
}

pub fn count(spec: &MethodSpec) -> Result<ParamBudget> {
    let method = spec.method;
    let dims = &spec.dims;
    let d = || need(dims.d, method, "d").map(|v| v as u64);
    let layers = || need(dims.layers, method, "layers").map(|v| v as u64);
    let m = || need(dims.m, method, "m").map(|v| v as u64);
    let t = || need(dims.t, method, "t").map(|v| v as u64);
    let raw: Vec<(&str, u64)> = match method {
        Method::FullFinetune => {
            let total = dims
                .backbone_params
                .ok_or_else(|| Error::Config("full-finetune: missing backbone_params".into()))?;
            vec![("backbone", total)]
        }
        Method::Adapter => {
            let (d, m, k) = (d()?, m()?, layers()? * need(dims.adapters_per_layer, method, "adapters_per_layer")? as u64);
            vec![
                ("down weight", d * m * k),
                ("down bias", m * k),
                ("up weight", m * d * k),
                ("up bias", d * k),
            ]
        }
        Method::Compacter => {
            let n = need(dims.n, method, "n")?;
            let (du, mu) = (d()? as usize, m()? as usize);
            divides(n, du, method, "d")?;
            divides(n, mu, method, "m")?;
            let (d, m, n) = (du as u64, mu as u64, n as u64);
            let k = layers()? * need(dims.adapters_per_layer, method, "adapters_per_layer")? as u64;
            // Each PHM weight factors its Bᵢ as a rank-one sᵢtᵢᵀ.
            vec![
                ("down s", d / n * n * k),
                ("down t", m / n * n * k),
                ("hidden bias", m * k),
                ("up s", d / n * n * k),
                ("up t", m / n * n * k),
                ("output bias", d * k),
                ("A", n.pow(3) * k),
            ]
        }
        Method::PromptTuning | Method::PromptTuning134 => vec![("prompt", t()? * d()?)],
        Method::PTuningV2 => vec![("prompt", t()? * layers()? * d()?)],
        _ => {
            let cfg = spec.generator_config()?.expect("IDPG method");
            let n_layers = if cfg.is_multi() { layers()? as usize } else { 1 };
            generator_components(&cfg, n_layers)?
        }
    };
    let components: Vec<Component> = raw
        .into_iter()
        .map(|(label, count)| Component {
            label: label.to_string(),
            count,
            display: render(count, units(method, label, count)),
        })
        .collect();
    let total = components.iter().map(|c| c.count).sum();
    Ok(ParamBudget {
        method,
        display: render(total, units(method, "total", total)),
        table_display: render(total, table_unit(method, total)),
        components,
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub method: Method,
    /// Live trainable scalars per component (head excluded).
    pub live: BTreeMap<String, u64>,
    pub expected: BTreeMap<String, u64>,
    pub total: u64,
}

/// Trainable scalars of a live model grouped by component label. Frozen
/// parameters and the head are skipped; each parameter is counted once.
pub fn live_components<T: Scalar>(model: &IdpgModel<T>) -> BTreeMap<String, u64> {
    let mut live = BTreeMap::new();
    for (_, p) in model.store.iter() {
        if p.trainable && p.group != ParamGroup::Head {
            *live.entry(p.component.clone()).or_insert(0) += p.value().numel() as u64;
        }
    }
    live
}

/// Compares a live model's trainable parameters with `count(spec)`.
pub fn audit<T: Scalar>(model: &IdpgModel<T>, spec: &MethodSpec) -> Result<AuditReport> {
    let live = live_components(model);
    let budget = count(spec)?;
    let expected: BTreeMap<String, u64> = budget.components.iter().map(|c| (c.label.clone(), c.count)).collect();
    if live != expected {
        let labels: std::collections::BTreeSet<&String> = live.keys().chain(expected.keys()).collect();
        let details = labels
            .into_iter()
            .filter_map(|l| {
                let (a, b) = (live.get(l).copied().unwrap_or(0), expected.get(l).copied().unwrap_or(0));
                (a != b).then(|| format!("{l}: live {a} vs expected {b} (delta {})", a as i128 - b as i128))
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Audit {
            method: spec.method.to_string(),
            details,
        });
    }
    Ok(AuditReport {
        method: spec.method,
        total: budget.total,
        live,
        expected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn budget(m: Method) -> ParamBudget {
        count(&MethodSpec::reference(m)).unwrap()
    }

    fn comps(b: &ParamBudget) -> Vec<(&str, u64, &str)> {
        b.components
            .iter()
            .map(|c| (c.label.as_str(), c.count, c.display.as_str()))
            .collect()
    }

    #[test]
    fn reference_totals() {
        let want = [
            (Method::FullFinetune, 355_000_000, "355M"),
            (Method::Adapter, 1_622_784, "1.55M"),
            (Method::Compacter, 152_832, "149.25K"),
            (Method::PromptTuning, 5_120, "5K"),
            (Method::PromptTuning134, 137_216, "134K"),
            (Method::PTuningV2, 122_880, "120K"),
            (Method::SIdpgPhm, 107_776, "105K"),
            (Method::SIdpgDnn, 1_578_240, "1.5M"),
            (Method::MIdpgPhmGlove, 144_704, "141K"),
            (Method::MIdpgPhm, 137_232, "134K"),
            (Method::MIdpgDnn, 221_200, "216K"),
        ];
        for (m, total, display) in want {
            let b = budget(m);
            assert_eq!((b.total, b.display.as_str()), (total, display), "{m}");
            assert_eq!(b.total, b.components.iter().map(|c| c.count).sum::<u64>());
        }
        assert_eq!(budget(Method::Compacter).table_display, "149K");
    }

    #[test]
    fn reference_components() {
        assert_eq!(
            comps(&budget(Method::MIdpgPhm)),
            [("W1", 1040, "1K"), ("W2", 128_000, "125K"), ("A", 8192, "8K")]
        );
        assert_eq!(
            comps(&budget(Method::SIdpgPhm)),
            [("W1", 16_640, "16.25K"), ("W2", 87_040, "85K"), ("A", 4096, "4K")]
        );
        assert_eq!(
            comps(&budget(Method::MIdpgPhmGlove)),
            [("W1", 1216, "1216"), ("W2", 143_360, "140K"), ("A", 128, "128")]
        );
        let c: Vec<_> = comps(&budget(Method::Compacter)).iter().map(|x| x.2.to_string()).collect();
        assert_eq!(c, ["48K", "0.75K", "0.75K", "48K", "0.75K", "48K", "3K"]);
    }

    #[test]
    fn missing_and_indivisible_dims() {
        let mut s = MethodSpec::reference(Method::MIdpgPhm);
        s.dims.n = Some(3);
        assert!(matches!(count(&s), Err(Error::Config(_))));
        s.dims.n = None;
        assert!(matches!(count(&s), Err(Error::Config(msg)) if msg.contains('n')));
        let mut s = MethodSpec::reference(Method::Compacter);
        s.dims.m = Some(6);
        assert!(count(&s).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("lora".parse::<Method>().is_err());
    }

    /// Toy spec of `method` with n = 4, enc_dim = 8 and the given dims.
    pub(crate) fn toy_spec(method: Method, d: usize, layers: usize, m: usize, t: usize, tc: &TransformerConfig) -> MethodSpec {
        let mut s = MethodSpec::reference(method);
        s.dims.d = Some(d);
        s.dims.t = s.dims.t.map(|_| t);
        s.dims.m = s.dims.m.map(|_| m);
        s.dims.n = s.dims.n.map(|_| 4);
        s.dims.enc_dim = s.dims.enc_dim.map(|_| 8);
        s.dims.backbone_params = s.dims.backbone_params.map(|_| tc.param_count() as u64);
        s.dims.layers = match method {
            Method::PTuningV2 | Method::MIdpgPhm | Method::MIdpgPhmGlove | Method::MIdpgDnn => Some(layers),
            _ => None,
        };
        s
    }

    fn toy_table() -> EmbeddingTable {
        let mut t = EmbeddingTable::new(8);
        for (i, w) in ["the", "cat", "dog", "sat"].iter().enumerate() {
            t.insert(*w, (0..8).map(|j| ((i + j) % 3) as f64 - 1.0).collect()).unwrap();
        }
        t
    }

    #[test]
    fn live_models_match_formula() {
        for (d, layers, m, t) in [(8, 1, 4, 2), (16, 2, 8, 3), (32, 3, 16, 5)] {
            let tc = TransformerConfig {
                num_layers: layers,
                hidden: d,
                heads: 2,
                ffn_inner: 2 * d,
                vocab_size: 20,
                max_seq: 16,
                dropout_rate: 0.0,
            };
            for method in Method::ALL.into_iter().filter(|m| m.is_constructible()) {
                let spec = toy_spec(method, d, layers, m, t, &tc);
                let vocab = Vocab::build(["the cat sat"], 20).unwrap();
                let model: IdpgModel<f32> = spec
                    .build_model(&tc, HeadMode::Classification { num_labels: 2 }, vocab, Some(toy_table()), 1)
                    .unwrap();
                let report = audit(&model, &spec).unwrap_or_else(|e| panic!("{method} at d={d}: {e}"));
                if method != Method::FullFinetune {
                    assert!(!report.live.contains_key("backbone"));
                }
            }
        }
    }

    #[test]
    fn audit_reports_component_delta() {
        let tc = TransformerConfig {
            hidden: 8,
            ..TransformerConfig::default()
        };
        let spec = toy_spec(Method::MIdpgPhm, 8, 2, 4, 2, &tc);
        let mut model: IdpgModel<f64> = spec
            .build_model(&tc, HeadMode::Regression, Vocab::build(["a b"], 10).unwrap(), None, 0)
            .unwrap();
        model.freeze_backbone(false);
        match audit(&model, &spec) {
            Err(Error::Audit { details, .. }) => assert!(details.contains("backbone"), "{details}"),
            other => panic!("expected audit failure, got {other:?}"),
        }
    }

    #[test]
    fn sharing_an_a_set_saves_n_cubed() {
        use crate::params::ParamStore;
        use crate::phm::{PhmLinear, PhmSpec, SharedAPool};
        use rand::SeedableRng;
        let n = 4;
        let build = |shared: bool| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            let mut store = ParamStore::<f64>::new();
            let mut pool = SharedAPool::new();
            let p0 = pool.create(&mut store, "a0", n, ParamGroup::Generator, &mut rng).unwrap();
            let p1 = if shared {
                p0
            } else {
                pool.create(&mut store, "a1", n, ParamGroup::Generator, &mut rng).unwrap()
            };
            for (name, p) in [("l0", p0), ("l1", p1)] {
                let spec = PhmSpec {
                    name,
                    n,
                    in_dim: 8,
                    out_dim: 16,
                    num_biases: 1,
                    group: ParamGroup::Generator,
                    component: "W",
                };
                PhmLinear::new(&mut store, &mut pool, p, spec, &mut rng).unwrap();
            }
            store.iter().map(|(_, p)| p.value().numel()).sum::<usize>()
        };
        assert_eq!(build(false) - build(true), n * n * n);
    }

    fn dims_strategy() -> impl Strategy<Value = (usize, usize, usize, usize)> {
        // (t, m multiplier, layers, d multiplier) with n = 4 dividing m and d
        (1usize..12, 1usize..8, 1usize..12, 1usize..8)
    }

    proptest! {
        #[test]
        fn monotone_in_t_m_layers((t, mm, layers, dm) in dims_strategy()) {
            for method in Method::ALL.into_iter().filter(|m| *m != Method::FullFinetune) {
                let base = |t: usize, m: usize, l: usize| {
                    let mut s = MethodSpec::reference(method);
                    s.dims.d = Some(4 * dm);
                    s.dims.t = s.dims.t.map(|_| t);
                    s.dims.m = s.dims.m.map(|_| m);
                    s.dims.layers = s.dims.layers.map(|_| l);
                    s.dims.n = s.dims.n.map(|_| 4);
                    s.dims.enc_dim = s.dims.enc_dim.map(|_| 8);
                    count(&s).unwrap().total
                };
                let m = 4 * mm;
                let x = base(t, m, layers);
                prop_assert!(base(t + 1, m, layers) >= x);
                prop_assert!(base(t, m + 4, layers) >= x);
                prop_assert!(base(t, m, layers + 1) >= x);
            }
        }
    }
}
