//! Transformer text encoder: token + positional embeddings, pre-norm
//! blocks with causally masked self-attention, end-token pooling, and a
//! linear projection into the shared embedding space.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::ParamStore;
use crate::ops::Op;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TextTowerConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Output dimension C of the shared space.
    pub embed_dim: usize,
}

pub fn init_params<R: Rng>(
    cfg: &TextTowerConfig,
    prefix: &str,
    store: &mut ParamStore,
    rng: &mut R,
) {
    let d = cfg.width;
    store.insert(
        format!("{prefix}.token_embed"),
        Tensor::uniform(&[cfg.vocab_size, d], 0.02, rng),
    );
    store.insert(
        format!("{prefix}.pos_embed"),
        Tensor::uniform(&[cfg.max_len, d], 0.01, rng),
    );
    for l in 0..cfg.layers {
        init_block(&format!("{prefix}.blk{l}"), d, store, rng);
    }
    store.insert(format!("{prefix}.final_norm.gain"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.final_norm.bias"), Tensor::zeros(&[d]));
    store.insert(
        format!("{prefix}.proj"),
        Tensor::xavier(&[d, cfg.embed_dim], d, cfg.embed_dim, rng),
    );
}

/// Shared transformer block parameters (also used by the audio tower).
pub(crate) fn init_block<R: Rng>(prefix: &str, d: usize, store: &mut ParamStore, rng: &mut R) {
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(
            format!("{prefix}.attn.{name}"),
            Tensor::xavier(&[d, d], d, d, rng),
        );
    }
    store.insert(format!("{prefix}.attn.bo"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.norm1.gain"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.norm1.bias"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.norm2.gain"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.norm2.bias"), Tensor::zeros(&[d]));
    let hidden = 4 * d;
    store.insert(
        format!("{prefix}.mlp.w1"),
        Tensor::xavier(&[d, hidden], d, hidden, rng),
    );
    store.insert(format!("{prefix}.mlp.b1"), Tensor::zeros(&[hidden]));
    store.insert(
        format!("{prefix}.mlp.w2"),
        Tensor::xavier(&[hidden, d], hidden, d, rng),
    );
    store.insert(format!("{prefix}.mlp.b2"), Tensor::zeros(&[d]));
}

pub(crate) fn layer_norm(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let gain = g.bind(store, &format!("{prefix}.gain"));
    let bias = g.bind(store, &format!("{prefix}.bias"));
    g.apply(Op::LayerNorm { eps: 1e-5 }, &[x, gain, bias])
}

/// Multi-head self-attention over `x` `[len, d]`. `mask`, when present,
/// is a `[len, len]` additive logit mask.
pub(crate) fn self_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    heads: usize,
    mask: Option<NodeId>,
) -> Result<NodeId> {
    let (len, d) = {
        let s = g.value(x).shape();
        (s[0], s[1])
    };
    if d % heads != 0 {
        return Err(Error::Config(format!(
            "width {} not divisible by {} heads",
            d, heads
        )));
    }
    let dh = d / heads;
    let wq = g.bind(store, &format!("{prefix}.wq"));
    let wk = g.bind(store, &format!("{prefix}.wk"));
    let wv = g.bind(store, &format!("{prefix}.wv"));
    let wo = g.bind(store, &format!("{prefix}.wo"));
    let bo = g.bind(store, &format!("{prefix}.bo"));

    let split = |g: &mut Graph, m: NodeId| -> Result<NodeId> {
        // [len, d] -> [heads, len, dh]
        let r = g.apply(
            Op::Reshape {
                shape: vec![len, heads, dh],
            },
            &[m],
        )?;
        g.apply(
            Op::Transpose {
                perm: vec![1, 0, 2],
            },
            &[r],
        )
    };
    let q = g.apply(Op::MatMul, &[x, wq])?;
    let k = g.apply(Op::MatMul, &[x, wk])?;
    let v = g.apply(Op::MatMul, &[x, wv])?;
    let qh = split(g, q)?;
    let kh = split(g, k)?;
    let vh = split(g, v)?;
    let kt = g.apply(
        Op::Transpose {
            perm: vec![0, 2, 1],
        },
        &[kh],
    )?;
    let logits = g.apply(Op::MatMul, &[qh, kt])?;
    let scale = g.leaf(Tensor::scalar(1.0 / (dh as f64).sqrt()));
    let mut scaled = g.apply(Op::Mul, &[logits, scale])?;
    if let Some(m) = mask {
        scaled = g.apply(Op::Add, &[scaled, m])?;
    }
    let weights = g.apply(Op::Softmax, &[scaled])?;
    let ctx = g.apply(Op::MatMul, &[weights, vh])?;
    let merged = g.apply(
        Op::Transpose {
            perm: vec![1, 0, 2],
        },
        &[ctx],
    )?;
    let flat = g.apply(
        Op::Reshape {
            shape: vec![len, d],
        },
        &[merged],
    )?;
    let out = g.apply(Op::MatMul, &[flat, wo])?;
    g.apply(Op::Add, &[out, bo])
}

/// Pre-norm transformer block with residual connections.
pub(crate) fn transformer_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    heads: usize,
    mask: Option<NodeId>,
) -> Result<NodeId> {
    let n1 = layer_norm(g, store, &format!("{prefix}.norm1"), x)?;
    let attn = self_attention(g, store, &format!("{prefix}.attn"), n1, heads, mask)?;
    let x = g.apply(Op::Add, &[x, attn])?;
    let n2 = layer_norm(g, store, &format!("{prefix}.norm2"), x)?;
    let w1 = g.bind(store, &format!("{prefix}.mlp.w1"));
    let b1 = g.bind(store, &format!("{prefix}.mlp.b1"));
    let w2 = g.bind(store, &format!("{prefix}.mlp.w2"));
    let b2 = g.bind(store, &format!("{prefix}.mlp.b2"));
    let h = g.apply(Op::MatMul, &[n2, w1])?;
    let h = g.apply(Op::Add, &[h, b1])?;
    let h = g.apply(Op::Gelu, &[h])?;
    let h = g.apply(Op::MatMul, &[h, w2])?;
    let h = g.apply(Op::Add, &[h, b2])?;
    g.apply(Op::Add, &[x, h])
}

fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = -1e30;
        }
    }
    Tensor::new(vec![len, len], data).expect("mask shape")
}

/// Encode a token sequence to its `[C]` label-semantics embedding.
pub fn encode_text(
    cfg: &TextTowerConfig,
    prefix: &str,
    store: &ParamStore,
    g: &mut Graph,
    token_ids: &[usize],
) -> Result<NodeId> {
    let len = token_ids.len();
    if len > cfg.max_len {
        return Err(Error::invalid(
            "encode_text",
            format!("sequence of {} exceeds positional table {}", len, cfg.max_len),
        ));
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::invalid(
            "encode_text",
            format!("token id {} out of vocab {}", bad, cfg.vocab_size),
        ));
    }
    let table = g.bind(store, &format!("{prefix}.token_embed"));
    let tok = g.apply(
        Op::EmbedLookup {
            indices: token_ids.to_vec(),
        },
        &[table],
    )?;
    let pos_table = g.bind(store, &format!("{prefix}.pos_embed"));
    let pos = g.apply(
        Op::EmbedLookup {
            indices: (0..len).collect(),
        },
        &[pos_table],
    )?;
    let mut x = g.apply(Op::Add, &[tok, pos])?;
    let mask = g.leaf(causal_mask(len));
    for l in 0..cfg.layers {
        x = transformer_block(g, store, &format!("{prefix}.blk{l}"), x, cfg.heads, Some(mask))?;
    }
    let x = layer_norm(g, store, &format!("{prefix}.final_norm"), x)?;
    // end-token pooling: the last position attends over the whole prompt
    let last = g.apply(
        Op::EmbedLookup {
            indices: vec![len - 1],
        },
        &[x],
    )?;
    let row = g.apply(
        Op::Reshape {
            shape: vec![cfg.width],
        },
        &[last],
    )?;
    let proj = g.bind(store, &format!("{prefix}.proj"));
    let flat = g.apply(
        Op::Reshape {
            shape: vec![1, cfg.width],
        },
        &[row],
    )?;
    let out = g.apply(Op::MatMul, &[flat, proj])?;
    g.apply(
        Op::Reshape {
            shape: vec![cfg.embed_dim],
        },
        &[out],
    )
}
