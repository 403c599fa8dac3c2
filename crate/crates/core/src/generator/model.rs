//! A backbone, an optional prompt module and a head bundled with their
//! parameter store.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::assemble::{assemble_input, insertion_index, overwrite_rows, PromptPosition};
use super::config::{GeneratorConfig, InputSource, SentenceEncoder};
use super::prompt::PromptGenerator;
use super::sentence::{encode_backbone_cls, encode_bag_of_vectors, EmbeddingTable};
use crate::error::{Error, Result};
use crate::nn::first_row;
use crate::nn::tokenizer::{words, PAD};
use crate::nn::{Backbone, Checkpoint, ClassifierHead, ForwardCtx, HeadMode, Target, TokenizedInput, TransformerConfig, Vocab};
use crate::params::{self, NewParam, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

/// Prompt machinery attached to the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PromptConfig {
    /// Plain backbone plus head.
    None,
    /// A learned prompt shared by all inputs; `deep` keeps one per layer.
    Static { prompt_len: usize, deep: bool },
    Generator(GeneratorConfig),
}

impl PromptConfig {
    pub fn prompt_len(&self) -> usize {
        match self {
            PromptConfig::None => 0,
            PromptConfig::Static { prompt_len, .. } => *prompt_len,
            PromptConfig::Generator(g) => g.prompt_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub transformer: TransformerConfig,
    pub head: HeadMode,
    pub prompt: PromptConfig,
    #[serde(default)]
    pub position: PromptPosition,
}

/// Learned constant prompt rows, `[t×d]` each.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub prompt_len: usize,
    pub deep: bool,
    pub ids: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub enum PromptModule {
    None,
    Static(PromptBank),
    Generator(PromptGenerator),
}

/// Tokenized input plus its cached sentence representation, if the prompt
/// module needs one.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded<T> {
    pub input: TokenizedInput,
    pub rep: Option<crate::tensor::Tensor<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// Log-probabilities (classification) or the `[1]` regression output.
    pub output: Var,
    pub cls: Var,
    /// First prompt row in the spliced sequence, when prompts are present.
    pub prompt_index: Option<usize>,
}

/// RNG streams, one per component, so adding or removing a component never
/// shifts another component's initial values.
mod stream {
    pub const BACKBONE: u64 = 0;
    pub const HEAD: u64 = 1;
    pub const GENERATOR: u64 = 2;
    pub const PROMPT: u64 = 3;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Clone, Debug)]
pub struct IdpgModel<T> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub table: Option<EmbeddingTable>,
    pub backbone: Backbone,
    pub prompt: PromptModule,
    pub head: ClassifierHead,
    pub store: ParamStore<T>,
}

impl<T: Scalar> IdpgModel<T> {
    pub fn new(config: ModelConfig, vocab: Vocab, table: Option<EmbeddingTable>, seed: u64) -> Result<Self> {
        let tc = &config.transformer;
        tc.validate()?;
        if vocab.len() > tc.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, embedding table holds {}",
                vocab.len(),
                tc.vocab_size
            )));
        }
        let t = config.prompt.prompt_len();
        if t + 3 > tc.max_seq {
            return Err(Error::Config(format!(
                "prompt length {t} leaves no room for tokens within max_seq {}",
                tc.max_seq
            )));
        }
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, tc.clone(), &mut rng_for(seed, stream::BACKBONE))?;
        let prompt = match &config.prompt {
            PromptConfig::None => PromptModule::None,
            PromptConfig::Static { prompt_len, deep } => {
                if *prompt_len == 0 {
                    return Err(Error::Config("static prompt length must be >= 1".into()));
                }
                let mut rng = rng_for(seed, stream::PROMPT);
                let banks = if *deep { tc.num_layers } else { 1 };
                let ids = (0..banks)
                    .map(|l| {
                        store.add(
                            NewParam {
                                path: &format!("prompt/bank.{l}"),
                                kind: ParamKind::Prompt,
                                group: ParamGroup::Prompt,
                                component: "prompt",
                            },
                            params::normal(&[*prompt_len, tc.hidden], 1.0, &mut rng),
                        )
                    })
                    .collect::<Result<_>>()?;
                PromptModule::Static(PromptBank {
                    prompt_len: *prompt_len,
                    deep: *deep,
                    ids,
                })
            }
            PromptConfig::Generator(g) => {
                if g.model_dim != tc.hidden {
                    return Err(Error::Config(format!(
                        "generator model_dim {} != backbone hidden {}",
                        g.model_dim, tc.hidden
                    )));
                }
                if let SentenceEncoder::BagOfVectors { dim } = g.encoder {
                    match &table {
                        Some(tb) if tb.dim() == dim => {}
                        Some(tb) => {
                            return Err(Error::Config(format!(
                                "embedding table dim {} != encoder dim {dim}",
                                tb.dim()
                            )))
                        }
                        None => return Err(Error::Config("bag-of-vectors encoder needs an embedding table".into())),
                    }
                }
                let mut rng = rng_for(seed, stream::GENERATOR);
                PromptModule::Generator(PromptGenerator::new(&mut store, g.clone(), tc.num_layers, &mut rng)?)
            }
        };
        let head = ClassifierHead::new(&mut store, tc.hidden, config.head, &mut rng_for(seed, stream::HEAD))?;
        Ok(Self {
            config,
            vocab,
            table,
            backbone,
            prompt,
            head,
            store,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.config.prompt.prompt_len()
    }

    pub fn generator(&self) -> Option<&PromptGenerator> {
        match &self.prompt {
            PromptModule::Generator(g) => Some(g),
            _ => None,
        }
    }

    /// Tokenizes within `max_seq − t` so the spliced sequence fits.
    pub fn tokenize(&self, s1: &str, s2: Option<&str>) -> Result<TokenizedInput> {
        let budget = self.config.transformer.max_seq - self.prompt_len();
        self.vocab.encode(s1, s2, budget)
    }

    /// Tokenizes and computes the sentence representation when needed.
    pub fn prepare(&self, s1: &str, s2: Option<&str>) -> Result<Encoded<T>> {
        let input = self.tokenize(s1, s2)?;
        let rep = match self.generator().map(|g| g.config.encoder) {
            None => None,
            Some(SentenceEncoder::BackboneCls) => Some(encode_backbone_cls(&self.backbone, &self.store, &input.ids)?.vector),
            Some(SentenceEncoder::BagOfVectors { .. }) => {
                let mut ws = words(s1);
                if let Some(s) = s2 {
                    ws.extend(words(s));
                }
                let table = self.table.as_ref().expect("checked at construction");
                Some(encode_bag_of_vectors(&ws, table)?.vector)
            }
        };
        Ok(Encoded { input, rep })
    }

    /// Full forward pass. `pad_to` appends `[PAD]` tokens (masked out of
    /// attention) until the token sequence has that length.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        enc: &Encoded<T>,
        pad_to: Option<usize>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ModelOutput> {
        let store = &self.store;
        let len = enc.input.ids.len();
        let pads = match pad_to {
            Some(p) if p < len => {
                return Err(Error::Contract(format!("pad_to {p} is shorter than the input ({len})")));
            }
            Some(p) => p - len,
            None => 0,
        };
        let mut ids = enc.input.ids.clone();
        ids.extend(std::iter::repeat_n(PAD, pads));
        let embedded = self.backbone.embed(tape, store, &ids)?;
        let t = self.prompt_len();
        let mask: Option<Vec<bool>> = (pads > 0).then(|| (0..len + t + pads).map(|i| i >= len + t).collect());
        let index = if t > 0 {
            Some(insertion_index(enc.input.layout, self.config.position)?)
        } else {
            None
        };
        let rep = match (&self.prompt, &enc.rep) {
            (PromptModule::Generator(_), Some(r)) => Some(tape.constant(r.clone())),
            (PromptModule::Generator(_), None) => {
                return Err(Error::Contract("generator forward needs a sentence representation".into()))
            }
            _ => None,
        };
        let mut h = match &self.prompt {
            PromptModule::None => embedded,
            PromptModule::Static(bank) => {
                let p = tape.param(store, bank.ids[0]);
                assemble_input(tape, embedded, p, index.expect("t > 0"))?
            }
            PromptModule::Generator(g) => {
                let p = g.generate(tape, store, rep.expect("rep"), 0)?;
                assemble_input(tape, embedded, p, index.expect("t > 0"))?
            }
        };
        for l in 0..self.backbone.layers.len() {
            if l > 0 {
                match &self.prompt {
                    PromptModule::Static(bank) if bank.deep => {
                        let p = tape.param(store, bank.ids[l]);
                        h = overwrite_rows(tape, h, p, index.expect("t > 0"))?;
                    }
                    PromptModule::Generator(g) if g.config.is_multi() => {
                        let src = match g.config.input_source {
                            InputSource::Layer0 => rep.expect("rep"),
                            InputSource::PreviousLayer => first_row(tape, h)?,
                        };
                        let p = g.generate(tape, store, src, l)?;
                        h = overwrite_rows(tape, h, p, index.expect("t > 0"))?;
                    }
                    _ => {}
                }
            }
            h = self.backbone.layer(tape, store, l, h, mask.as_deref(), ctx)?.output;
        }
        let cls = first_row(tape, h)?;
        let output = self.head.classify(tape, store, cls)?;
        Ok(ModelOutput {
            output,
            cls,
            prompt_index: index,
        })
    }

    pub fn loss(&self, tape: &mut Tape<T>, out: &ModelOutput, target: Target) -> Result<Var> {
        self.head.loss(tape, out.output, target)
    }

    /// Marks the backbone parameters (not) trainable.
    pub fn freeze_backbone(&mut self, frozen: bool) {
        self.store.set_group_trainable(ParamGroup::Backbone, !frozen);
    }

    fn meta(&self) -> Result<BTreeMap<String, serde_json::Value>> {
        let mut meta = BTreeMap::new();
        meta.insert("model".into(), serde_json::to_value(&self.config)?);
        meta.insert("vocab".into(), serde_json::to_value(self.vocab.tokens())?);
        if let Some(t) = &self.table {
            meta.insert("embedding_table".into(), serde_json::to_value(t)?);
        }
        Ok(meta)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<T>> {
        Checkpoint::from_store(&self.store, &self.config.transformer, self.meta()?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    /// Rebuilds the model described by a checkpoint's metadata and loads its
    /// parameter values. Every parameter starts trainable.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let field = |name: &str| {
            ck.meta
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata field {name}")))
        };
        let config: ModelConfig = serde_json::from_value(field("model")?)?;
        if config.transformer != ck.transformer {
            return Err(Error::Checkpoint("header and model transformer configs differ".into()));
        }
        let vocab = Vocab::from_tokens(serde_json::from_value(field("vocab")?)?)?;
        let table = match ck.meta.get("embedding_table") {
            Some(v) => Some(serde_json::from_value(v.clone())?),
            None => None,
        };
        let mut model = Self::new(config, vocab, table, 0)?;
        ck.apply_to(&mut model.store)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::config::{ArchVariant, Depth, Flavor, Nonlinearity, Sharing};
    use crate::tensor::Tensor;

    fn tcfg() -> TransformerConfig {
        TransformerConfig {
            num_layers: 2,
            hidden: 8,
            heads: 2,
            ffn_inner: 16,
            vocab_size: 30,
            max_seq: 16,
            dropout_rate: 0.0,
        }
    }

    fn vocab() -> Vocab {
        Vocab::build(["the cat sat on a mat", "dogs bark loudly at night"], 30).unwrap()
    }

    fn gen_cfg(depth: Depth, sharing: Sharing) -> GeneratorConfig {
        GeneratorConfig {
            flavor: Flavor::Phm { n: 2 },
            prompt_len: 2,
            hidden: 4,
            model_dim: 8,
            depth,
            sharing,
            input_source: InputSource::PreviousLayer,
            encoder: SentenceEncoder::BackboneCls,
            arch: ArchVariant::Plain,
            nonlinearity: Nonlinearity::Tanh,
        }
    }

    fn model(prompt: PromptConfig, seed: u64) -> IdpgModel<f64> {
        let cfg = ModelConfig {
            transformer: tcfg(),
            head: HeadMode::Classification { num_labels: 2 },
            prompt,
            position: PromptPosition::Pos0,
        };
        IdpgModel::new(cfg, vocab(), None, seed).unwrap()
    }

    fn logits(m: &IdpgModel<f64>, s1: &str, s2: Option<&str>, pad: Option<usize>) -> Tensor<f64> {
        let enc = m.prepare(s1, s2).unwrap();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &enc, pad, &mut ForwardCtx::eval()).unwrap();
        tape.value(out.output).clone()
    }

    #[test]
    fn backbone_independent_of_prompt_module() {
        let plain = model(PromptConfig::None, 3);
        let with_gen = model(PromptConfig::Generator(gen_cfg(Depth::Multi, Sharing::M)), 3);
        for (a, b) in plain.store.iter().zip(with_gen.store.iter()).take_while(|(a, _)| a.1.group == ParamGroup::Backbone) {
            assert_eq!(a.1.path, b.1.path);
            assert_eq!(a.1.value(), b.1.value());
        }
        let ids = plain.tokenize("the cat", None).unwrap().ids;
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let s1 = plain.backbone.encode(&mut t1, &plain.store, &ids, &mut ForwardCtx::eval()).unwrap();
        let s2 = with_gen.backbone.encode(&mut t2, &with_gen.store, &ids, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(t1.value(s1.cls), t2.value(s2.cls));
    }

    #[test]
    fn degenerate_generator_equals_static_bank() {
        for (depth, deep) in [(Depth::Single, false), (Depth::Multi, true)] {
            let mut g = model(PromptConfig::Generator(gen_cfg(depth, Sharing::M)), 5);
            let mut s = model(PromptConfig::Static { prompt_len: 2, deep }, 5);
            let gen = g.generator().unwrap().clone();
            gen.zero_weights(&mut g.store);
            let PromptModule::Static(bank) = s.prompt.clone() else { panic!() };
            for (l, &bank_id) in bank.ids.iter().enumerate() {
                let b = gen.up_bias_id(l).unwrap();
                let value = Tensor::from_fn(&[16], |i| ((i * 7 + l * 3) % 5) as f64 * 0.3 - 0.6);
                g.store.set_value(b, value.clone()).unwrap();
                s.store.set_value(bank_id, value.reshaped(&[2, 8]).unwrap()).unwrap();
            }
            let (hw, hb) = (s.head.weight, s.head.bias);
            s.store.set_value(hw, g.store.value(g.head.weight).clone()).unwrap();
            s.store.set_value(hb, g.store.value(g.head.bias).clone()).unwrap();
            for text in ["the cat sat", "dogs bark at night", "a mat"] {
                let a = logits(&g, text, None, None);
                let b = logits(&s, text, None, None);
                let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a), bits(&b), "{depth:?} {text}");
            }
        }
    }

    #[test]
    fn padding_does_not_change_output() {
        for prompt in [
            PromptConfig::None,
            PromptConfig::Static { prompt_len: 2, deep: true },
            PromptConfig::Generator(gen_cfg(Depth::Multi, Sharing::M)),
        ] {
            let m = model(prompt, 1);
            let a = logits(&m, "the cat sat on", Some("dogs bark"), None);
            let b = logits(&m, "the cat sat on", Some("dogs bark"), Some(12));
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn prompts_change_the_prediction() {
        let plain = model(PromptConfig::None, 2);
        let g = model(PromptConfig::Generator(gen_cfg(Depth::Multi, Sharing::M)), 2);
        let a = logits(&plain, "the cat", None, None);
        let b = logits(&g, "the cat", None, None);
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn single_sentence_rejects_pair_positions() {
        let mut m = model(PromptConfig::Static { prompt_len: 1, deep: false }, 0);
        m.config.position = PromptPosition::Pos2;
        let enc = m.prepare("the cat", None).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(m.forward(&mut tape, &enc, None, &mut ForwardCtx::eval()), Err(Error::Config(_))));
        let enc = m.prepare("the cat", Some("a mat")).unwrap();
        assert!(m.forward(&mut tape, &enc, None, &mut ForwardCtx::eval()).is_ok());
    }

    #[test]
    fn cached_rep_matches_recompute() {
        let m = model(PromptConfig::Generator(gen_cfg(Depth::Multi, Sharing::M)), 4);
        let enc = m.prepare("dogs bark", None).unwrap();
        let cached = enc.clone();
        let a = logits(&m, "dogs bark", None, None);
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &cached, None, &mut ForwardCtx::eval()).unwrap();
        let b = tape.value(out.output).clone();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(PromptConfig::Generator(gen_cfg(Depth::Multi, Sharing::L)), 6);
        let ck = m.checkpoint().unwrap();
        let back = IdpgModel::<f64>::from_checkpoint(&Checkpoint::from_json(&ck.to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(logits(&m, "the mat", None, None), logits(&back, "the mat", None, None));
        assert_eq!(back.checkpoint().unwrap(), ck);
    }

    #[test]
    fn frozen_backbone_gets_no_gradient() {
        let mut m = model(PromptConfig::Generator(gen_cfg(Depth::Multi, Sharing::M)), 7);
        m.freeze_backbone(true);
        let enc = m.prepare("the cat sat", None).unwrap();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &enc, None, &mut ForwardCtx::eval()).unwrap();
        let loss = m.loss(&mut tape, &out, Target::Class(1)).unwrap();
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        assert!(!grads.is_empty());
        for (id, _) in &grads {
            assert_ne!(m.store.get(*id).group, ParamGroup::Backbone);
        }
        assert!(grads.iter().any(|(id, g)| m.store.get(*id).group == ParamGroup::Generator
            && g.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = ModelConfig {
            transformer: tcfg(),
            head: HeadMode::Regression,
            prompt: PromptConfig::Generator(gen_cfg(Depth::Multi, Sharing::M)),
            position: PromptPosition::Pos3,
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
        let toml_text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&toml_text).unwrap(), cfg);
    }
}
