//! Convolutional similarity head: reshape audio tokens to a 3D feature
//! map, gate it with channel-then-spatial convolutional attention, and
//! project through a small conv stack into the shared embedding space.
//! A mean-pool + linear baseline head shares the same interface.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::ParamStore;
use crate::ops::Op;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// The convolutional similarity head.
    Cscm,
    /// Mean-pool the tokens and project linearly (text-assistance-only
    /// ablation baseline).
    MeanPool,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cscm" => Ok(HeadKind::Cscm),
            "mean_pool" => Ok(HeadKind::MeanPool),
            other => Err(Error::Config(format!("unknown head kind {:?}", other))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Cscm => "cscm",
            HeadKind::MeanPool => "mean_pool",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CscmConfig {
    /// Feature map depth d (token width).
    pub depth: usize,
    /// Feature map height h.
    pub height: usize,
    /// Feature map width w.
    pub width: usize,
    /// Channel-attention MLP reduction ratio r.
    pub reduction: usize,
    /// Spatial-attention conv kernel edge (odd).
    pub spatial_kernel: usize,
    /// Output dimension C.
    pub embed_dim: usize,
}

impl CscmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::Config("spatial kernel must be odd".into()));
        }
        if self.depth / self.reduction == 0 {
            return Err(Error::Config(format!(
                "reduction {} leaves no channel-MLP hidden units for depth {}",
                self.reduction, self.depth
            )));
        }
        // two stride-2 convs must leave at least a 1x1 map
        let after = |e: usize| (e + 2 - 3) / 2 + 1; // 3x3, stride 2, pad 1
        if after(after(self.height)) == 0 || after(after(self.width)) == 0 {
            return Err(Error::Config(format!(
                "map {}x{} too small for the conv stack",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Trainable element count of the CSCM head.
    pub fn parameter_count(&self) -> usize {
        let d = self.depth;
        let hidden = d / self.reduction;
        let attn = d * hidden + hidden + hidden * d + d // channel MLP
            + 2 * self.spatial_kernel * self.spatial_kernel + 1; // spatial conv
        let convs = d * d * 9 + d * d * 9 + d * d; // 3x3, 3x3, 1x1
        attn + convs + d * self.embed_dim + self.embed_dim
    }

    /// Element count of the dense alternative the head replaces: one
    /// linear layer from the full token matrix to C.
    pub fn dense_projection_count(&self) -> usize {
        self.height * self.width * self.depth * self.embed_dim + self.embed_dim
    }
}

pub fn init_params<R: Rng>(
    cfg: &CscmConfig,
    head: HeadKind,
    prefix: &str,
    store: &mut ParamStore,
    rng: &mut R,
) {
    let d = cfg.depth;
    match head {
        HeadKind::Cscm => {
            let hidden = (d / cfg.reduction).max(1);
            store.insert(
                format!("{prefix}.ch_attn.w1"),
                Tensor::xavier(&[d, hidden], d, hidden, rng),
            );
            store.insert(format!("{prefix}.ch_attn.b1"), Tensor::zeros(&[hidden]));
            store.insert(
                format!("{prefix}.ch_attn.w2"),
                Tensor::xavier(&[hidden, d], hidden, d, rng),
            );
            store.insert(format!("{prefix}.ch_attn.b2"), Tensor::zeros(&[d]));
            let k = cfg.spatial_kernel;
            store.insert(
                format!("{prefix}.sp_attn.kernel"),
                Tensor::xavier(&[1, 2, k, k], 2 * k * k, 1, rng),
            );
            store.insert(format!("{prefix}.sp_attn.bias"), Tensor::scalar(0.0));
            store.insert(
                format!("{prefix}.conv1"),
                Tensor::xavier(&[d, d, 3, 3], d * 9, d, rng),
            );
            store.insert(
                format!("{prefix}.conv2"),
                Tensor::xavier(&[d, d, 3, 3], d * 9, d, rng),
            );
            store.insert(
                format!("{prefix}.conv3"),
                Tensor::xavier(&[d, d, 1, 1], d, d, rng),
            );
        }
        HeadKind::MeanPool => {}
    }
    store.insert(
        format!("{prefix}.out_proj"),
        Tensor::xavier(&[d, cfg.embed_dim], d, cfg.embed_dim, rng),
    );
    store.insert(format!("{prefix}.out_bias"), Tensor::zeros(&[cfg.embed_dim]));
}

/// Token matrix `[h*w, d]` to feature map `[d, h, w]`: token k lands at
/// cell `(k div w, k mod w)` and the token dimension becomes depth.
pub fn reshape_tokens(g: &mut Graph, tokens: NodeId, h: usize, w: usize) -> Result<NodeId> {
    let shape = g.value(tokens).shape().to_vec();
    if shape.len() != 2 || shape[0] != h * w {
        return Err(Error::invalid(
            "reshape_tokens",
            format!("{} tokens cannot fill a {}x{} grid", shape[0], h, w),
        ));
    }
    let d = shape[1];
    let t = g.apply(
        Op::Transpose {
            perm: vec![1, 0],
        },
        &[tokens],
    )?;
    g.apply(
        Op::Reshape {
            shape: vec![d, h, w],
        },
        &[t],
    )
}

/// Channel attention (pooled-descriptor MLP, sigmoid gate per channel)
/// followed by spatial attention (channel mean/max maps through a conv,
/// sigmoid gate per cell). Output shape equals input shape.
pub fn conv_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    m: NodeId,
) -> Result<NodeId> {
    let shape = g.value(m).shape().to_vec();
    let (d, h, w) = (shape[0], shape[1], shape[2]);

    // channel gate
    let flat = g.apply(
        Op::Reshape {
            shape: vec![d, h * w],
        },
        &[m],
    )?;
    let avg = g.apply(Op::MeanPool { axis: 1 }, &[flat])?;
    let mx = g.apply(Op::MaxPool { axis: 1 }, &[flat])?;
    let mlp = |g: &mut Graph, x: NodeId| -> Result<NodeId> {
        let w1 = g.bind(store, &format!("{prefix}.ch_attn.w1"));
        let b1 = g.bind(store, &format!("{prefix}.ch_attn.b1"));
        let w2 = g.bind(store, &format!("{prefix}.ch_attn.w2"));
        let b2 = g.bind(store, &format!("{prefix}.ch_attn.b2"));
        let row = g.apply(Op::Reshape { shape: vec![1, d] }, &[x])?;
        let hdn = g.apply(Op::MatMul, &[row, w1])?;
        let hdn = g.apply(Op::Add, &[hdn, b1])?;
        let hdn = g.apply(Op::Gelu, &[hdn])?;
        let out = g.apply(Op::MatMul, &[hdn, w2])?;
        let out = g.apply(Op::Add, &[out, b2])?;
        g.apply(Op::Reshape { shape: vec![d] }, &[out])
    };
    let a = mlp(g, avg)?;
    let b = mlp(g, mx)?;
    let sum = g.apply(Op::Add, &[a, b])?;
    let ch_gate = g.apply(Op::Sigmoid, &[sum])?;
    // gate per channel: move depth last so the [d] gate broadcasts
    let hw_first = g.apply(
        Op::Transpose {
            perm: vec![1, 2, 0],
        },
        &[m],
    )?;
    let gated = g.apply(Op::Mul, &[hw_first, ch_gate])?;
    let m = g.apply(
        Op::Transpose {
            perm: vec![2, 0, 1],
        },
        &[gated],
    )?;

    // spatial gate
    let mean_map = g.apply(Op::MeanPool { axis: 0 }, &[m])?;
    let max_map = g.apply(Op::MaxPool { axis: 0 }, &[m])?;
    let mean3 = g.apply(
        Op::Reshape {
            shape: vec![1, h, w],
        },
        &[mean_map],
    )?;
    let max3 = g.apply(
        Op::Reshape {
            shape: vec![1, h, w],
        },
        &[max_map],
    )?;
    let stacked = g.apply(Op::Concat { axis: 0 }, &[mean3, max3])?;
    let kernel = g.bind(store, &format!("{prefix}.sp_attn.kernel"));
    let k = g.value(kernel).shape()[2];
    let conv = g.apply(
        Op::Conv2d {
            stride: (1, 1),
            pad: (k / 2, k / 2),
        },
        &[stacked, kernel],
    )?;
    let bias = g.bind(store, &format!("{prefix}.sp_attn.bias"));
    let conv = g.apply(Op::Add, &[conv, bias])?;
    let sp_gate3 = g.apply(Op::Sigmoid, &[conv])?;
    let sp_gate = g.apply(
        Op::Reshape {
            shape: vec![h, w],
        },
        &[sp_gate3],
    )?;
    g.apply(Op::Mul, &[m, sp_gate])
}

/// Conv stack to the shared space: 3x3 stride 2 -> gelu -> 3x3 stride 2 ->
/// gelu -> 1x1 -> global average pool -> linear to C.
pub fn project(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    m: NodeId,
    embed_dim: usize,
) -> Result<NodeId> {
    let conv = |g: &mut Graph, x: NodeId, name: &str, stride: usize, pad: usize| -> Result<NodeId> {
        let kernel = g.bind(store, &format!("{prefix}.{name}"));
        g.apply(
            Op::Conv2d {
                stride: (stride, stride),
                pad: (pad, pad),
            },
            &[x, kernel],
        )
    };
    let x = conv(g, m, "conv1", 2, 1)?;
    let x = g.apply(Op::Gelu, &[x])?;
    let x = conv(g, x, "conv2", 2, 1)?;
    let x = g.apply(Op::Gelu, &[x])?;
    let x = conv(g, x, "conv3", 1, 0)?;
    let shape = g.value(x).shape().to_vec();
    let (d, oh, ow) = (shape[0], shape[1], shape[2]);
    let flat = g.apply(
        Op::Reshape {
            shape: vec![d, oh * ow],
        },
        &[x],
    )?;
    let pooled = g.apply(Op::MeanPool { axis: 1 }, &[flat])?;
    linear_to_embedding(g, store, prefix, pooled, d, embed_dim)
}

fn linear_to_embedding(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    d: usize,
    embed_dim: usize,
) -> Result<NodeId> {
    let row = g.apply(Op::Reshape { shape: vec![1, d] }, &[x])?;
    let proj = g.bind(store, &format!("{prefix}.out_proj"));
    let bias = g.bind(store, &format!("{prefix}.out_bias"));
    let out = g.apply(Op::MatMul, &[row, proj])?;
    let out = g.apply(Op::Add, &[out, bias])?;
    g.apply(
        Op::Reshape {
            shape: vec![embed_dim],
        },
        &[out],
    )
}

/// Ablation baseline: mean-pool the token sequence and project linearly.
pub fn baseline_pool_project(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    tokens: NodeId,
    embed_dim: usize,
) -> Result<NodeId> {
    let d = g.value(tokens).shape()[1];
    let pooled = g.apply(Op::MeanPool { axis: 0 }, &[tokens])?;
    linear_to_embedding(g, store, prefix, pooled, d, embed_dim)
}

/// Full head: tokens `[h*w, d]` to the audio embedding `[C]`.
pub fn head_forward(
    cfg: &CscmConfig,
    head: HeadKind,
    prefix: &str,
    store: &ParamStore,
    g: &mut Graph,
    tokens: NodeId,
) -> Result<NodeId> {
    match head {
        HeadKind::Cscm => {
            let m = reshape_tokens(g, tokens, cfg.height, cfg.width)?;
            let m = conv_attention(g, store, prefix, m)?;
            project(g, store, prefix, m, cfg.embed_dim)
        }
        HeadKind::MeanPool => baseline_pool_project(g, store, prefix, tokens, cfg.embed_dim),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> CscmConfig {
        CscmConfig {
            depth: 16,
            height: 4,
            width: 4,
            reduction: 4,
            spatial_kernel: 7,
            embed_dim: 24,
        }
    }

    fn setup(head: HeadKind, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&cfg(), head, "head", &mut store, &mut rng);
        store
    }

    fn rand_tokens(seed: u64, count: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[count, d], 1.0, &mut rng)
    }

    #[test]
    fn reshape_full_scale_map() {
        let mut g = Graph::new();
        let tokens = g.leaf(Tensor::zeros(&[64, 768]));
        let m = reshape_tokens(&mut g, tokens, 8, 8).unwrap();
        assert_eq!(g.value(m).shape(), &[768, 8, 8]);
    }

    #[test]
    fn reshape_single_token() {
        let mut g = Graph::new();
        let tokens = g.leaf(Tensor::new(vec![1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let m = reshape_tokens(&mut g, tokens, 1, 1).unwrap();
        assert_eq!(g.value(m).shape(), &[5, 1, 1]);
        assert_eq!(g.value(m).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn reshape_roundtrip_is_bijective() {
        let mut g = Graph::new();
        let t = rand_tokens(3, 12, 7);
        let tokens = g.leaf(t.clone());
        let m = reshape_tokens(&mut g, tokens, 3, 4).unwrap();
        let flat = g
            .apply(
                Op::Reshape {
                    shape: vec![7, 12],
                },
                &[m],
            )
            .unwrap();
        let back = g
            .apply(
                Op::Transpose {
                    perm: vec![1, 0],
                },
                &[flat],
            )
            .unwrap();
        assert_eq!(g.value(back).data(), t.data());
    }

    #[test]
    fn reshape_count_mismatch_reports_both() {
        let mut g = Graph::new();
        let tokens = g.leaf(Tensor::zeros(&[10, 4]));
        let err = reshape_tokens(&mut g, tokens, 3, 4).unwrap_err().to_string();
        assert!(err.contains("10") && err.contains("3x4"), "{}", err);
    }

    #[test]
    fn saturated_gates_pass_input_through() {
        let c = cfg();
        let mut store = setup(HeadKind::Cscm, 0);
        // push both sigmoids to exactly 1.0 (exp(-1e4) underflows to 0)
        store
            .get_mut("head.ch_attn.b2")
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 1e4);
        store
            .get_mut("head.ch_attn.w2")
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        store.get_mut("head.sp_attn.bias").data_mut()[0] = 1e4;
        store
            .get_mut("head.sp_attn.kernel")
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let m_in = g.leaf(rand_tokens(5, c.depth, c.height * c.width).reshaped(vec![
            c.depth,
            c.height,
            c.width,
        ])
        .unwrap());
        let out = conv_attention(&mut g, &store, "head", m_in).unwrap();
        assert_eq!(g.value(out).data(), g.value(m_in).data());
    }

    #[test]
    fn gates_shrink_magnitudes() {
        let c = cfg();
        let store = setup(HeadKind::Cscm, 1);
        let mut g = Graph::new();
        let m_in = g.leaf(
            rand_tokens(6, c.depth, c.height * c.width)
                .reshaped(vec![c.depth, c.height, c.width])
                .unwrap(),
        );
        let out = conv_attention(&mut g, &store, "head", m_in).unwrap();
        assert_eq!(g.value(out).shape(), g.value(m_in).shape());
        for (o, i) in g.value(out).data().iter().zip(g.value(m_in).data()) {
            assert!(o.abs() <= i.abs() + 1e-12);
        }
    }

    #[test]
    fn constant_input_gate_is_flip_symmetric() {
        // With a constant map and a uniform gate kernel, the only spatial
        // structure comes from how many conv taps land inside the map,
        // which is symmetric under horizontal and vertical flips.
        let c = cfg();
        let mut store = setup(HeadKind::Cscm, 2);
        store
            .get_mut("head.sp_attn.kernel")
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.05);
        let mut g = Graph::new();
        let m_in = g.leaf(Tensor::full(&[c.depth, c.height, c.width], 0.7));
        let out = conv_attention(&mut g, &store, "head", m_in).unwrap();
        let data = g.value(out).data();
        let (hh, ww) = (c.height, c.width);
        for ch in 0..c.depth {
            let cells = &data[ch * hh * ww..(ch + 1) * hh * ww];
            for i in 0..hh {
                for j in 0..ww {
                    let v = cells[i * ww + j];
                    let hflip = cells[i * ww + (ww - 1 - j)];
                    let vflip = cells[(hh - 1 - i) * ww + j];
                    assert!((v - hflip).abs() < 1e-12 && (v - vflip).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn project_output_length_and_zero_case() {
        let c = cfg();
        let store = setup(HeadKind::Cscm, 3);
        let mut g = Graph::new();
        let zero = g.leaf(Tensor::zeros(&[c.depth, c.height, c.width]));
        let out = project(&mut g, &store, "head", zero, c.embed_dim).unwrap();
        assert_eq!(g.value(out).shape(), &[c.embed_dim]);
        // zero input, zero biases -> zero embedding
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cscm_head_cheaper_than_dense_projection_at_full_scale() {
        let full = crate::model::ModelConfig::full_scale().cscm;
        assert!(full.parameter_count() < full.dense_projection_count());
    }

    #[test]
    fn baseline_is_permutation_invariant_cscm_is_not() {
        let c = cfg();
        let tokens = rand_tokens(7, c.height * c.width, c.depth);
        let mut permuted_data = tokens.data().to_vec();
        let d = c.depth;
        permuted_data.rotate_left(3 * d); // cyclic shift of whole tokens

        let run = |head: HeadKind, data: &[f64], seed: u64| {
            let store = setup(head, seed);
            let mut g = Graph::new();
            let t = g.leaf(Tensor::new(vec![c.height * c.width, d], data.to_vec()).unwrap());
            let out = head_forward(&c, head, "head", &store, &mut g, t).unwrap();
            g.value(out).data().to_vec()
        };
        let base_a = run(HeadKind::MeanPool, tokens.data(), 11);
        let base_b = run(HeadKind::MeanPool, &permuted_data, 11);
        for (x, y) in base_a.iter().zip(&base_b) {
            assert!((x - y).abs() < 1e-9);
        }
        let cscm_a = run(HeadKind::Cscm, tokens.data(), 11);
        let cscm_b = run(HeadKind::Cscm, &permuted_data, 11);
        assert!(
            cscm_a
                .iter()
                .zip(&cscm_b)
                .any(|(x, y)| (x - y).abs() > 1e-9),
            "spatial permutation left the CSCM output unchanged"
        );
    }

    #[test]
    fn baseline_pool_of_identical_tokens() {
        let c = cfg();
        let store = setup(HeadKind::MeanPool, 4);
        // all-identical tokens: pooling equals any single token
        let one = rand_tokens(8, 1, c.depth);
        let repeated: Vec<f64> = one.data().repeat(6);
        let run = |data: &[f64], rows: usize| {
            let mut g = Graph::new();
            let t = g.leaf(Tensor::new(vec![rows, c.depth], data.to_vec()).unwrap());
            let out =
                baseline_pool_project(&mut g, &store, "head", t, c.embed_dim).unwrap();
            g.value(out).data().to_vec()
        };
        let a = run(one.data(), 1);
        let b = run(&repeated, 6);
        assert_eq!(a.len(), c.embed_dim);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cscm_params_all_reached_by_gradient() {
        let c = cfg();
        let store = setup(HeadKind::Cscm, 6);
        let mut g = Graph::new();
        let t = g.leaf(rand_tokens(9, c.height * c.width, c.depth));
        let out = head_forward(&c, HeadKind::Cscm, "head", &store, &mut g, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = g.leaf(Tensor::uniform(&[c.embed_dim], 1.0, &mut rng));
        let prod = g.apply(Op::Mul, &[out, w]).unwrap();
        let loss = g.apply(Op::MeanPool { axis: 0 }, &[prod]).unwrap();
        let grads = g.backward(loss).unwrap();
        for (name, grad) in grads.named(&g) {
            assert!(
                grad.data().iter().any(|&v| v != 0.0),
                "dead parameter {}",
                name
            );
        }
    }
}
