//! Audio classification by aligning clip embeddings with the semantics of
//! prompted class labels.
//!
//! A text tower encodes prompted class names ("an audio clip of dog bark"),
//! an audio tower encodes mel-spectrogram patches with windowed attention,
//! a convolutional similarity head projects audio tokens into the shared
//! embedding space, and a symmetric contrastive loss trains everything.
//! Classification is argmax cosine similarity against the label embeddings.
//!
//! ```
//! use sonalign::contrastive::cosine_similarity;
//!
//! let s = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
//! assert!((s - 0.5f64.sqrt()).abs() < 1e-8);
//! ```

pub mod audio;
pub mod contrastive;
pub mod cscm;
pub mod data;
pub mod dsp;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use ops::Op;
pub use tensor::Tensor;

/// The guide from `book/`, embedded chapter by chapter so that every code
/// sample in it compiles and runs as a doc-test.
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/dsp.md")]
    pub mod dsp {}
    #[doc = include_str!("../../../book/src/tokenizer.md")]
    pub mod tokenizer {}
    #[doc = include_str!("../../../book/src/towers.md")]
    pub mod towers {}
    #[doc = include_str!("../../../book/src/loss.md")]
    pub mod loss {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
}
