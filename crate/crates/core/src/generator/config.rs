use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    Dnn,
    Phm { n: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Depth {
    /// Prompts injected once, at the embedding layer.
    Single,
    /// Prompts regenerated before every encoder layer.
    Multi,
}

/// How multi-layer generators share parameters across layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sharing {
    /// One generator, weights and biases shared by all layers.
    S,
    /// Shared weights, one up-projection bias per layer.
    M,
    /// An independent generator per layer.
    L,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputSource {
    /// Every layer's generator reads the cached sentence representation.
    Layer0,
    /// Layer ℓ reads the position-0 state of layer ℓ−1's output.
    PreviousLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SentenceEncoder {
    BackboneCls,
    BagOfVectors { dim: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchVariant {
    Plain,
    /// Adds the (dimension-matched) sentence rep to every generated row.
    Residual,
    /// Layer-normalizes every generated row.
    LayerNorm,
    /// `LN(LN(row) + LN(rep))`.
    ResidualLayerNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    Tanh,
    Relu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub flavor: Flavor,
    /// Number of prompt rows `t`.
    pub prompt_len: usize,
    /// Bottleneck width `m`.
    pub hidden: usize,
    /// Backbone width `d`.
    pub model_dim: usize,
    pub depth: Depth,
    pub sharing: Sharing,
    pub input_source: InputSource,
    pub encoder: SentenceEncoder,
    pub arch: ArchVariant,
    pub nonlinearity: Nonlinearity,
}

impl GeneratorConfig {
    /// Scaled-down M-IDPG-PHM: t=5, m=16, shared weights with per-layer
    /// biases, fed by the previous layer's output.
    pub fn m_idpg_phm(model_dim: usize, n: usize) -> Self {
        Self {
            flavor: Flavor::Phm { n },
            prompt_len: 5,
            hidden: 16,
            model_dim,
            depth: Depth::Multi,
            sharing: Sharing::M,
            input_source: InputSource::PreviousLayer,
            encoder: SentenceEncoder::BackboneCls,
            arch: ArchVariant::Plain,
            nonlinearity: Nonlinearity::Tanh,
        }
    }

    pub fn enc_dim(&self) -> usize {
        match self.encoder {
            SentenceEncoder::BackboneCls => self.model_dim,
            SentenceEncoder::BagOfVectors { dim } => dim,
        }
    }

    pub fn is_multi(&self) -> bool {
        self.depth == Depth::Multi
    }

    /// Independent (down, up) sets: `N` for L-sharing, otherwise one.
    pub fn num_sets(&self, num_layers: usize) -> usize {
        if self.is_multi() && self.sharing == Sharing::L {
            num_layers
        } else {
            1
        }
    }

    /// Up-projection biases per set: `N` for M-sharing, otherwise one.
    pub fn up_biases(&self, num_layers: usize) -> usize {
        if self.is_multi() && self.sharing == Sharing::M {
            num_layers
        } else {
            1
        }
    }

    /// A sets per generator set: single-layer generators share one set
    /// between both projections, multi-layer ones keep one per projection.
    pub fn a_pools_per_set(&self) -> usize {
        match (self.flavor, self.depth) {
            (Flavor::Dnn, _) => 0,
            (Flavor::Phm { .. }, Depth::Single) => 1,
            (Flavor::Phm { .. }, Depth::Multi) => 2,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let dims = [
            ("prompt_len", self.prompt_len),
            ("hidden", self.hidden),
            ("model_dim", self.model_dim),
            ("enc_dim", self.enc_dim()),
            ("num_layers", num_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("generator {name} must be >= 1")));
        }
        if let Flavor::Phm { n } = self.flavor {
            for (name, v) in [("hidden", self.hidden), ("model_dim", self.model_dim), ("enc_dim", self.enc_dim())] {
                if n == 0 || v % n != 0 {
                    return Err(Error::Config(format!("PHM factor n={n} must divide {name}={v}")));
                }
            }
        }
        if self.is_multi() && self.input_source == InputSource::PreviousLayer && self.enc_dim() != self.model_dim {
            return Err(Error::Config(format!(
                "previous-layer input needs enc_dim == model_dim ({} != {})",
                self.enc_dim(),
                self.model_dim
            )));
        }
        Ok(())
    }
}
