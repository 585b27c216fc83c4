//! Audio signal encoder: mel-spectrogram patchification and the
//! hierarchical windowed-attention transformer.

mod patch;
mod tower;

pub use patch::{patchify, PatchSequence};
pub use tower::{encode_audio, init_params, AudioTowerConfig};
