//! The full dual-encoder model: a named parameter store shared by both
//! towers and the similarity head, plus the end-to-end forward pass from
//! mel-spectrogram and token sequence to the pair of embeddings.

use crate::audio::{self, AudioTowerConfig};
use crate::cscm::{self, CscmConfig, HeadKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::text::{self, TextTowerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Named trainable tensors, iterated in deterministic (sorted) order.
#[derive(Default, Clone, Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        debug_assert!(!self.params.contains_key(&name), "duplicate param {name}");
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }
}

/// Architecture of the whole model; see [`ModelConfig::desk`] and
/// [`ModelConfig::full_scale`] for the two built-in profiles.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub text: TextTowerConfig,
    pub audio: AudioTowerConfig,
    pub cscm: CscmConfig,
    pub head: HeadKind,
    /// Shared embedding dimension C.
    pub embed_dim: usize,
}

impl ModelConfig {
    /// Small profile trainable on a CPU in minutes. The audio grid is
    /// sized for 32x32 mel inputs (32 mel bins, 32 frames).
    pub fn desk() -> Self {
        ModelConfig {
            text: TextTowerConfig {
                vocab_size: 0, // filled in from the loaded vocabulary
                max_len: 76,
                width: 128,
                layers: 2,
                heads: 4,
                embed_dim: 1024,
            },
            audio: AudioTowerConfig {
                mel_bins: 32,
                frames: 32,
                patch: (4, 4),
                width: 64,
                window: 4,
                stages: 2,
                blocks_per_stage: 2,
                heads: 4,
            },
            cscm: CscmConfig {
                depth: 128,
                height: 4,
                width: 4,
                reduction: 8,
                spatial_kernel: 7,
                embed_dim: 1024,
            },
            head: HeadKind::Cscm,
            embed_dim: 1024,
        }
    }

    /// Full-scale profile from the published configuration: 64 audio
    /// tokens of width 768 reshaped to 768x8x8, C = 1024, vocab 49152,
    /// max text length 76.
    pub fn full_scale() -> Self {
        ModelConfig {
            text: TextTowerConfig {
                vocab_size: 49152,
                max_len: 76,
                width: 512,
                layers: 12,
                heads: 8,
                embed_dim: 1024,
            },
            // 64x256 mel, 1x4 patches -> 64x64 grid; three 2x2 merges
            // leave an 8x8 grid at width 96 * 8 = 768.
            audio: AudioTowerConfig {
                mel_bins: 64,
                frames: 256,
                patch: (1, 4),
                width: 96,
                window: 4,
                stages: 4,
                blocks_per_stage: 2,
                heads: 4,
            },
            cscm: CscmConfig {
                depth: 768,
                height: 8,
                width: 8,
                reduction: 8,
                spatial_kernel: 7,
                embed_dim: 1024,
            },
            head: HeadKind::Cscm,
            embed_dim: 1024,
        }
    }

    /// Check that the audio tower's output grid matches what the
    /// similarity head expects, and that every stage divides evenly.
    pub fn validate(&self) -> Result<()> {
        let (count, dim, h, w) = self.audio.output_grid()?;
        if h != self.cscm.height || w != self.cscm.width || dim != self.cscm.depth {
            return Err(Error::Config(format!(
                "audio tower yields {} tokens of dim {} on a {}x{} grid, but the head expects {}x{}x{}",
                count, dim, h, w, self.cscm.depth, self.cscm.height, self.cscm.width
            )));
        }
        if self.cscm.embed_dim != self.embed_dim || self.text.embed_dim != self.embed_dim {
            return Err(Error::Config(
                "text, audio and shared embedding dimensions disagree".into(),
            ));
        }
        self.cscm.validate()?;
        Ok(())
    }

    /// Initialize every parameter from a seed.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        text::init_params(&self.text, "text", &mut store, &mut rng);
        audio::init_params(&self.audio, "audio", &mut store, &mut rng);
        cscm::init_params(&self.cscm, self.head, "head", &mut store, &mut rng);
        store
    }
}

/// Forward one clip's mel patches and one prompt's tokens to the pair of
/// embeddings `(audio, text)`, each `[C]`.
pub fn forward_pair(
    cfg: &ModelConfig,
    store: &ParamStore,
    graph: &mut Graph,
    mel_patches: NodeId,
    token_ids: &[usize],
) -> Result<(NodeId, NodeId)> {
    let tokens = audio::encode_audio(&cfg.audio, "audio", store, graph, mel_patches)?;
    let audio_embed = cscm::head_forward(&cfg.cscm, cfg.head, "head", store, graph, tokens)?;
    let text_embed = text::encode_text(&cfg.text, "text", store, graph, token_ids)?;
    Ok((audio_embed, text_embed))
}
