//! Instance-dependent prompt generation.
//!
//! A sentence representation `M(x)` (the backbone's `h_CLS` on the bare input,
//! or an average of static word vectors) is passed through a two-layer
//! bottleneck `up(σ(down(M(x))))` to produce `t` prompt rows of width `d`,
//! which are spliced into the embedded input. In multi-layer mode the prompt
//! slots are regenerated and overwritten before every encoder layer.

mod assemble;
mod config;
mod model;
mod projection;
mod prompt;
mod sentence;

pub use assemble::{assemble_input, insertion_index, PromptPosition};
pub use config::{
    ArchVariant, Depth, Flavor, GeneratorConfig, InputSource, Nonlinearity, SentenceEncoder, Sharing,
};
pub use model::{Encoded, IdpgModel, ModelConfig, ModelOutput, PromptBank, PromptConfig, PromptModule};
pub use projection::{DenseLinear, Projection};
pub use prompt::{dnn_generator_param_count, GeneratorSet, PromptGenerator};
pub use sentence::{encode_backbone_cls, encode_bag_of_vectors, EmbeddingTable, RepCache, RepSource, SentenceRep};
