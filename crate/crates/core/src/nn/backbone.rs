use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{self, NewParam, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_inner: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub dropout_rate: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden: 32,
            heads: 2,
            ffn_inner: 64,
            vocab_size: 1000,
            max_seq: 64,
            dropout_rate: 0.0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_inner", self.ffn_inner),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("transformer {name} must be >= 1")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads={} must divide hidden={}",
                self.heads, self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Scalars in a backbone built from this config.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.hidden, self.ffn_inner);
        let per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d);
        (self.vocab_size + self.max_seq) * d + self.num_layers * per_layer
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

/// Per-pass options: train mode enables dropout and needs an RNG for it.
pub struct ForwardCtx<'a> {
    pub train: bool,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl ForwardCtx<'_> {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: None,
        }
    }
}

/// Hidden sequences after the embedding and after every layer.
#[derive(Clone, Debug)]
pub struct EncoderState {
    pub hidden: Vec<Var>,
    pub cls: Var,
}

/// Intermediates of one encoder layer, exposed for inspection.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub output: Var,
    /// Row-stochastic `[seq×seq]` attention matrix per head.
    pub attention: Vec<Var>,
    /// Concatenated per-head attention outputs, before the output projection.
    pub context: Var,
    /// Value projection `h·Wv + bv`.
    pub values: Var,
}

/// Post-norm transformer encoder with learned positional embeddings.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: TransformerConfig,
    pub tokens: ParamId,
    pub positions: ParamId,
    pub layers: Vec<LayerParams>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.hidden, config.ffn_inner);
        let add = |store: &mut ParamStore<T>, path: String, kind, value| {
            store.add(
                NewParam {
                    path: &path,
                    kind,
                    group: ParamGroup::Backbone,
                    component: "backbone",
                },
                value,
            )
        };
        let tokens = add(
            store,
            "backbone/embed/tokens".into(),
            ParamKind::Embedding,
            params::normal(&[config.vocab_size, d], 1.0, rng),
        )?;
        let positions = add(
            store,
            "backbone/embed/positions".into(),
            ParamKind::Embedding,
            // Positions are scaled by 1/sqrt(d) so token identity dominates the sum.
            params::normal(&[config.max_seq, d], 1.0 / (d as f64).sqrt(), rng),
        )?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = |name: &str| format!("backbone/layer.{l}/{name}");
            let dense = |store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R| {
                let w = add(
                    store,
                    p(&format!("{name}.weight")),
                    ParamKind::Weight,
                    params::glorot_uniform(&[fan_in, fan_out], fan_in, fan_out, rng),
                )?;
                let b = add(store, p(&format!("{name}.bias")), ParamKind::Bias, Tensor::zeros(&[fan_out]))?;
                Ok::<_, Error>((w, b))
            };
            let (q_w, q_b) = dense(store, "attn.q", d, d, rng)?;
            let (k_w, k_b) = dense(store, "attn.k", d, d, rng)?;
            let (v_w, v_b) = dense(store, "attn.v", d, d, rng)?;
            let (o_w, o_b) = dense(store, "attn.o", d, d, rng)?;
            let ln1_g = add(store, p("ln1.gain"), ParamKind::Norm, Tensor::full(&[d], T::one()))?;
            let ln1_b = add(store, p("ln1.shift"), ParamKind::Norm, Tensor::zeros(&[d]))?;
            let (ff1_w, ff1_b) = dense(store, "ffn.in", d, f, rng)?;
            let (ff2_w, ff2_b) = dense(store, "ffn.out", f, d, rng)?;
            let ln2_g = add(store, p("ln2.gain"), ParamKind::Norm, Tensor::full(&[d], T::one()))?;
            let ln2_b = add(store, p("ln2.shift"), ParamKind::Norm, Tensor::zeros(&[d]))?;
            layers.push(LayerParams {
                q_w,
                q_b,
                k_w,
                k_b,
                v_w,
                v_b,
                o_w,
                o_b,
                ln1_g,
                ln1_b,
                ff1_w,
                ff1_b,
                ff2_w,
                ff2_b,
                ln2_g,
                ln2_b,
            });
        }
        Ok(Self {
            config,
            tokens,
            positions,
            layers,
        })
    }

    /// Token rows plus positional rows `0..ids.len()`.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        let positions: Vec<usize> = (0..ids.len()).collect();
        self.embed_at(tape, store, ids, &positions)
    }

    /// Token rows plus the positional rows given explicitly per token.
    pub fn embed_at<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ids: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Length {
                len: 0,
                max: self.config.max_seq,
            });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_seq) {
            return Err(Error::Length {
                len: p + 1,
                max: self.config.max_seq,
            });
        }
        let table = tape.param(store, self.tokens);
        let tok = tape.gather_rows(table, ids)?;
        let pos_table = tape.param(store, self.positions);
        let pos = tape.gather_rows(pos_table, positions)?;
        tape.add(tok, pos)
    }

    fn dense<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = tape.param(store, w);
        let bv = tape.param(store, b);
        let y = tape.matmul(x, wv)?;
        tape.add_row(y, bv)
    }

    fn dropout<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let rate = self.config.dropout_rate;
        if !ctx.train || rate == 0.0 {
            return Ok(x);
        }
        let rng = ctx
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Contract("train-mode dropout needs an RNG".into()))?;
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let n = tape.value(x).numel();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        tape.mul_const(x, mask)
    }

    /// One post-norm encoder block. `key_mask[j] == true` hides key `j` from
    /// every query (used for `[PAD]` positions).
    pub fn layer<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        index: usize,
        h: Var,
        key_mask: Option<&[bool]>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<LayerTrace> {
        let lp = self.layers.get(index).ok_or(Error::Index {
            what: "encoder layer",
            index,
            len: self.layers.len(),
        })?;
        let d = self.config.hidden;
        let (seq, width) = tape.value(h).dims2("encoder_layer")?;
        if seq == 0 {
            return Err(Error::Length {
                len: 0,
                max: self.config.max_seq,
            });
        }
        if width != d {
            return Err(Error::Dimension {
                op: "encoder_layer",
                lhs: vec![seq, d],
                rhs: vec![seq, width],
            });
        }
        let mask = match key_mask {
            Some(m) if m.len() != seq => {
                return Err(Error::Dimension {
                    op: "key_mask",
                    lhs: vec![seq],
                    rhs: vec![m.len()],
                })
            }
            Some(m) if m.iter().any(|&x| x) => Some(Tensor::from_fn(&[seq, seq], |i| {
                if m[i % seq] {
                    T::neg_infinity()
                } else {
                    T::zero()
                }
            })),
            _ => None,
        };

        let q = self.dense(tape, store, h, lp.q_w, lp.q_b)?;
        let k = self.dense(tape, store, h, lp.k_w, lp.k_b)?;
        let v = self.dense(tape, store, h, lp.v_w, lp.v_b)?;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut attention = Vec::with_capacity(heads);
        let mut contexts = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = &mask {
                scores = tape.add_const(scores, m)?;
            }
            let probs = tape.softmax(scores, 1)?;
            contexts.push(tape.matmul(probs, vh)?);
            attention.push(probs);
        }
        let context = if heads == 1 {
            contexts[0]
        } else {
            tape.concat_cols(&contexts)?
        };
        let attn_out = self.dense(tape, store, context, lp.o_w, lp.o_b)?;
        let attn_out = self.dropout(tape, attn_out, ctx)?;
        let res1 = tape.add(h, attn_out)?;
        let eps = T::from_f64(LN_EPS);
        let (g1, s1) = (tape.param(store, lp.ln1_g), tape.param(store, lp.ln1_b));
        let h1 = tape.layer_norm(res1, g1, s1, eps)?;

        let inner = self.dense(tape, store, h1, lp.ff1_w, lp.ff1_b)?;
        let inner = tape.gelu(inner);
        let ff = self.dense(tape, store, inner, lp.ff2_w, lp.ff2_b)?;
        let ff = self.dropout(tape, ff, ctx)?;
        let res2 = tape.add(h1, ff)?;
        let (g2, s2) = (tape.param(store, lp.ln2_g), tape.param(store, lp.ln2_b));
        let output = tape.layer_norm(res2, g2, s2, eps)?;
        Ok(LayerTrace {
            output,
            attention,
            context,
            values: v,
        })
    }

    /// Runs every layer over an already-embedded sequence.
    pub fn run_layers<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        embedded: Var,
        key_mask: Option<&[bool]>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<EncoderState> {
        let mut hidden = vec![embedded];
        let mut h = embedded;
        for l in 0..self.layers.len() {
            h = self.layer(tape, store, l, h, key_mask, ctx)?.output;
            hidden.push(h);
        }
        let cls = first_row(tape, h)?;
        Ok(EncoderState { hidden, cls })
    }

    /// Full encoder pass; `h_CLS` is the final layer's position-0 state.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ids: &[usize],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<EncoderState> {
        if ids.is_empty() || ids.len() > self.config.max_seq {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_seq,
            });
        }
        let embedded = self.embed(tape, store, ids)?;
        self.run_layers(tape, store, embedded, None, ctx)
    }
}

/// Row 0 of a `[seq×d]` matrix as a `[d]` vector.
pub(crate) fn first_row<T: Scalar>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    let d = tape.value(h).dims2("first_row")?.1;
    let row = tape.slice_rows(h, 0, 1)?;
    tape.reshape(row, &[d])
}
