//! Class-label semantics: prompt expansion, BPE tokenization, and the
//! transformer text tower.

mod bpe;
mod prompt;
mod tower;

pub use bpe::{BpeVocab, TokenSequence};
pub use prompt::{apply_prompt, PromptTemplate};
pub use tower::{encode_text, init_params, TextTowerConfig};

/// Transformer building blocks shared with the audio tower.
pub(crate) mod tower_internals {
    pub(crate) use super::tower::{init_block, layer_norm};
}
