//! Toy transformer encoder used as the frozen backbone, its classification
//! head, the whitespace tokenizer and the checkpoint format.

mod backbone;
pub mod checkpoint;
mod head;
pub mod tokenizer;

pub(crate) use backbone::first_row;
pub use backbone::{Backbone, EncoderState, ForwardCtx, LayerParams, LayerTrace, TransformerConfig, LN_EPS};
pub use checkpoint::{Checkpoint, ParamRecord, FORMAT_VERSION};
pub use head::{ClassifierHead, HeadMode, Target};
pub use tokenizer::{Layout, TokenizedInput, Vocab};
