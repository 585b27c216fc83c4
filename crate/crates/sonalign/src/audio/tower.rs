//! Hierarchical transformer over the patch grid: self-attention restricted
//! to non-overlapping k x k windows, with 2x2 patch merging (and a width
//! doubling) between stages.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::ParamStore;
use crate::ops::Op;
use crate::tensor::Tensor;
use crate::text::tower_internals as shared;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioTowerConfig {
    pub mel_bins: usize,
    pub frames: usize,
    /// Patch extent (frequency, time).
    pub patch: (usize, usize),
    /// Token width after the patch projection (doubles at each merge).
    pub width: usize,
    /// Attention window edge k; attention runs inside k x k grid windows.
    pub window: usize,
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub heads: usize,
}

impl AudioTowerConfig {
    pub fn input_grid(&self) -> (usize, usize) {
        (
            self.mel_bins.div_ceil(self.patch.0),
            self.frames.div_ceil(self.patch.1),
        )
    }

    /// Walk the stage arithmetic; errors if any stage's grid is not
    /// divisible by the window (or by 2 ahead of a merge).
    /// Returns `(token_count, width, grid_h, grid_w)` of the output.
    pub fn output_grid(&self) -> Result<(usize, usize, usize, usize)> {
        if self.stages == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("need at least one stage and block".into()));
        }
        let (mut gh, mut gw) = self.input_grid();
        let mut width = self.width;
        for stage in 0..self.stages {
            if gh % self.window != 0 || gw % self.window != 0 {
                return Err(Error::Config(format!(
                    "stage {}: grid {}x{} not divisible by window {}",
                    stage, gh, gw, self.window
                )));
            }
            if width % self.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {}: width {} not divisible by {} heads",
                    stage, width, self.heads
                )));
            }
            if stage + 1 < self.stages {
                if gh % 2 != 0 || gw % 2 != 0 {
                    return Err(Error::Config(format!(
                        "stage {}: grid {}x{} cannot be 2x2-merged",
                        stage, gh, gw
                    )));
                }
                gh /= 2;
                gw /= 2;
                width *= 2;
            }
        }
        Ok((gh * gw, width, gh, gw))
    }
}

pub fn init_params<R: Rng>(
    cfg: &AudioTowerConfig,
    prefix: &str,
    store: &mut ParamStore,
    rng: &mut R,
) {
    let patch_dim = cfg.patch.0 * cfg.patch.1;
    let (gh, gw) = cfg.input_grid();
    store.insert(
        format!("{prefix}.patch_proj"),
        Tensor::xavier(&[patch_dim, cfg.width], patch_dim, cfg.width, rng),
    );
    store.insert(format!("{prefix}.patch_bias"), Tensor::zeros(&[cfg.width]));
    store.insert(
        format!("{prefix}.pos_embed"),
        Tensor::uniform(&[gh * gw, cfg.width], 0.01, rng),
    );
    let mut width = cfg.width;
    for s in 0..cfg.stages {
        for b in 0..cfg.blocks_per_stage {
            shared::init_block(&format!("{prefix}.s{s}.blk{b}"), width, store, rng);
        }
        if s + 1 < cfg.stages {
            store.insert(
                format!("{prefix}.s{s}.merge.norm.gain"),
                Tensor::full(&[4 * width], 1.0),
            );
            store.insert(
                format!("{prefix}.s{s}.merge.norm.bias"),
                Tensor::zeros(&[4 * width]),
            );
            store.insert(
                format!("{prefix}.s{s}.merge.proj"),
                Tensor::xavier(&[4 * width, 2 * width], 4 * width, 2 * width, rng),
            );
            width *= 2;
        }
    }
    store.insert(format!("{prefix}.final_norm.gain"), Tensor::full(&[width], 1.0));
    store.insert(format!("{prefix}.final_norm.bias"), Tensor::zeros(&[width]));
}

/// Row order that groups tokens of one k x k window together.
fn window_order(gh: usize, gw: usize, k: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(gh * gw);
    for wr in 0..gh / k {
        for wc in 0..gw / k {
            for i in 0..k {
                for j in 0..k {
                    order.push((wr * k + i) * gw + wc * k + j);
                }
            }
        }
    }
    order
}

fn inverse_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; order.len()];
    for (pos, &row) in order.iter().enumerate() {
        inv[row] = pos;
    }
    inv
}

/// Multi-head attention restricted to non-overlapping windows: the token
/// matrix is gathered into window order, attended per window via batched
/// matmuls, and scattered back.
fn window_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    grid: (usize, usize),
    k: usize,
    heads: usize,
) -> Result<NodeId> {
    let (gh, gw) = grid;
    let len = gh * gw;
    let d = g.value(x).shape()[1];
    let dh = d / heads;
    let wsize = k * k;
    let nw = len / wsize;

    let order = window_order(gh, gw, k);
    let gathered = g.apply(Op::EmbedLookup { indices: order.clone() }, &[x])?;
    let wq = g.bind(store, &format!("{prefix}.wq"));
    let wk = g.bind(store, &format!("{prefix}.wk"));
    let wv = g.bind(store, &format!("{prefix}.wv"));
    let wo = g.bind(store, &format!("{prefix}.wo"));
    let bo = g.bind(store, &format!("{prefix}.bo"));

    let q = g.apply(Op::MatMul, &[gathered, wq])?;
    let kx = g.apply(Op::MatMul, &[gathered, wk])?;
    let v = g.apply(Op::MatMul, &[gathered, wv])?;
    // [len, d] -> [nw * heads, wsize, dh]
    let split = |g: &mut Graph, m: NodeId| -> Result<NodeId> {
        let r = g.apply(
            Op::Reshape {
                shape: vec![nw, wsize, heads, dh],
            },
            &[m],
        )?;
        let p = g.apply(
            Op::Transpose {
                perm: vec![0, 2, 1, 3],
            },
            &[r],
        )?;
        g.apply(
            Op::Reshape {
                shape: vec![nw * heads, wsize, dh],
            },
            &[p],
        )
    };
    let qh = split(g, q)?;
    let kh = split(g, kx)?;
    let vh = split(g, v)?;
    let kt = g.apply(
        Op::Transpose {
            perm: vec![0, 2, 1],
        },
        &[kh],
    )?;
    let logits = g.apply(Op::MatMul, &[qh, kt])?;
    let scale = g.leaf(Tensor::scalar(1.0 / (dh as f64).sqrt()));
    let scaled = g.apply(Op::Mul, &[logits, scale])?;
    let weights = g.apply(Op::Softmax, &[scaled])?;
    let ctx = g.apply(Op::MatMul, &[weights, vh])?;
    let unsplit = g.apply(
        Op::Reshape {
            shape: vec![nw, heads, wsize, dh],
        },
        &[ctx],
    )?;
    let back = g.apply(
        Op::Transpose {
            perm: vec![0, 2, 1, 3],
        },
        &[unsplit],
    )?;
    let flat = g.apply(
        Op::Reshape {
            shape: vec![len, d],
        },
        &[back],
    )?;
    let out = g.apply(Op::MatMul, &[flat, wo])?;
    let out = g.apply(Op::Add, &[out, bo])?;
    g.apply(
        Op::EmbedLookup {
            indices: inverse_order(&order),
        },
        &[out],
    )
}

fn window_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    grid: (usize, usize),
    k: usize,
    heads: usize,
) -> Result<NodeId> {
    let n1 = shared::layer_norm(g, store, &format!("{prefix}.norm1"), x)?;
    let attn = window_attention(g, store, &format!("{prefix}.attn"), n1, grid, k, heads)?;
    let x = g.apply(Op::Add, &[x, attn])?;
    let n2 = shared::layer_norm(g, store, &format!("{prefix}.norm2"), x)?;
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

/// Concatenate each 2x2 neighborhood and project 4w -> 2w.
fn patch_merge(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    grid: (usize, usize),
) -> Result<NodeId> {
    let (gh, gw) = grid;
    let d = g.value(x).shape()[1];
    let r = g.apply(
        Op::Reshape {
            shape: vec![gh / 2, 2, gw / 2, 2, d],
        },
        &[x],
    )?;
    let p = g.apply(
        Op::Transpose {
            perm: vec![0, 2, 1, 3, 4],
        },
        &[r],
    )?;
    let grouped = g.apply(
        Op::Reshape {
            shape: vec![(gh / 2) * (gw / 2), 4 * d],
        },
        &[p],
    )?;
    let normed = shared::layer_norm(g, store, &format!("{prefix}.norm"), grouped)?;
    let proj = g.bind(store, &format!("{prefix}.proj"));
    g.apply(Op::MatMul, &[normed, proj])
}

/// Encode flattened patches `[count, patch_dim]` into the token matrix
/// `[h_map * w_map, d_map]` consumed by the similarity head.
pub fn encode_audio(
    cfg: &AudioTowerConfig,
    prefix: &str,
    store: &ParamStore,
    g: &mut Graph,
    patches: NodeId,
) -> Result<NodeId> {
    let (expect_count, out_width, out_h, out_w) = cfg.output_grid()?;
    let (mut gh, mut gw) = cfg.input_grid();
    let got = g.value(patches).shape().to_vec();
    if got != [gh * gw, cfg.patch.0 * cfg.patch.1] {
        return Err(Error::shape(
            "encode_audio",
            &got,
            &[gh * gw, cfg.patch.0 * cfg.patch.1],
        ));
    }
    let proj = g.bind(store, &format!("{prefix}.patch_proj"));
    let bias = g.bind(store, &format!("{prefix}.patch_bias"));
    let x = g.apply(Op::MatMul, &[patches, proj])?;
    let x = g.apply(Op::Add, &[x, bias])?;
    let pos = g.bind(store, &format!("{prefix}.pos_embed"));
    let mut x = g.apply(Op::Add, &[x, pos])?;
    for s in 0..cfg.stages {
        for b in 0..cfg.blocks_per_stage {
            x = window_block(
                g,
                store,
                &format!("{prefix}.s{s}.blk{b}"),
                x,
                (gh, gw),
                cfg.window,
                cfg.heads,
            )?;
        }
        if s + 1 < cfg.stages {
            x = patch_merge(g, store, &format!("{prefix}.s{s}.merge"), x, (gh, gw))?;
            gh /= 2;
            gw /= 2;
        }
    }
    let x = shared::layer_norm(g, store, &format!("{prefix}.final_norm"), x)?;
    let shape = g.value(x).shape();
    debug_assert_eq!(shape, &[expect_count, out_width]);
    debug_assert_eq!(expect_count, out_h * out_w);
    Ok(x)
}
