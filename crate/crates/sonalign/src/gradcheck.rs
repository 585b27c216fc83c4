//! Central finite-difference verification of the backward rules.
//!
//! The check perturbs every input element of an op, evaluates a fixed
//! random projection of the output as the scalar loss, and compares the
//! central difference `(f(x+eps) - f(x-eps)) / (2 eps)` against the
//! gradient from the reverse sweep.

use crate::error::Result;
use crate::graph::Graph;
use crate::ops::{self, Op};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Worst relative deviation between backward() and central differences,
/// over every element of every input. `differentiable[i]` marks which
/// inputs to perturb (mask/index-style inputs are skipped by passing
/// `false`).
pub fn finite_difference_check(op: &Op, inputs: &[Tensor], eps: f64) -> Result<f64> {
    finite_difference_check_masked(op, inputs, &vec![true; inputs.len()], eps)
}

pub fn finite_difference_check_masked(
    op: &Op,
    inputs: &[Tensor],
    differentiable: &[bool],
    eps: f64,
) -> Result<f64> {
    assert!(eps > 0.0);
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let out = ops::forward(op, &refs)?;
    // Fixed random projection so the scalar loss depends on every output.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let weights: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let loss_of = |tensors: &[Tensor]| -> Result<f64> {
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let y = ops::forward(op, &refs)?;
        Ok(y.data().iter().zip(&weights).map(|(&v, &w)| v * w).sum())
    };

    // Analytic gradients via the graph.
    let mut g = Graph::new();
    let ids: Vec<_> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &diff)| {
            if diff {
                g.param("in", t.clone())
            } else {
                g.leaf(t.clone())
            }
        })
        .collect();
    let y = g.apply(op.clone(), &ids)?;
    // Project to a scalar: elementwise mul by weights, then mean * numel.
    let w = g.leaf(Tensor::new(out.shape().to_vec(), weights.clone())?);
    let prod = g.apply(Op::Mul, &[y, w])?;
    let flat = g.apply(
        Op::Reshape {
            shape: vec![out.numel()],
        },
        &[prod],
    )?;
    let mean = g.apply(Op::MeanPool { axis: 0 }, &[flat])?;
    let numel = g.leaf(Tensor::scalar(out.numel() as f64));
    let loss = g.apply(Op::Mul, &[mean, numel])?;
    let grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, tensor) in inputs.iter().enumerate() {
        if !differentiable[i] {
            continue;
        }
        let analytic = grads.get_or_zeros(&g, ids[i]);
        for e in 0..tensor.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= eps;
            let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * eps);
            let ad = analytic.data()[e];
            let denom = ad.abs().max(fd.abs()).max(1.0);
            worst = worst.max((ad - fd).abs() / denom);
        }
    }
    Ok(worst)
}

/// One random gradient-check case per differentiable primitive.
/// Returns `(name, max relative error)` pairs for reporting.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    };
    let eps = 1e-5;
    let mut results = Vec::new();
    let mut check = |name: &'static str, op: Op, inputs: Vec<Tensor>| -> Result<()> {
        let err = finite_difference_check(&op, &inputs, eps)?;
        results.push((name, err));
        Ok(())
    };

    check("matmul", Op::MatMul, vec![rand_t(&[4, 4]), rand_t(&[4, 4])])?;
    check(
        "matmul_batched",
        Op::MatMul,
        vec![rand_t(&[2, 3, 4]), rand_t(&[2, 4, 5])],
    )?;
    check(
        "conv2d",
        Op::Conv2d {
            stride: (2, 1),
            pad: (1, 1),
        },
        vec![rand_t(&[2, 5, 4]), rand_t(&[3, 2, 3, 3])],
    )?;
    check("add", Op::Add, vec![rand_t(&[3, 4]), rand_t(&[3, 4])])?;
    check("add_broadcast", Op::Add, vec![rand_t(&[3, 4]), rand_t(&[4])])?;
    check("mul", Op::Mul, vec![rand_t(&[3, 4]), rand_t(&[3, 4])])?;
    check(
        "layer_norm",
        Op::LayerNorm { eps: 1e-5 },
        vec![rand_t(&[8]), rand_t(&[8]), rand_t(&[8])],
    )?;
    check(
        "layer_norm_2d",
        Op::LayerNorm { eps: 1e-5 },
        vec![rand_t(&[3, 6]), rand_t(&[6]), rand_t(&[6])],
    )?;
    check("softmax", Op::Softmax, vec![rand_t(&[3, 5])])?;
    check("gelu", Op::Gelu, vec![rand_t(&[4, 4])])?;
    check("sigmoid", Op::Sigmoid, vec![rand_t(&[4, 4])])?;
    check("mean_pool", Op::MeanPool { axis: 1 }, vec![rand_t(&[3, 4, 2])])?;
    check("max_pool", Op::MaxPool { axis: 0 }, vec![rand_t(&[5, 3])])?;
    check(
        "reshape",
        Op::Reshape { shape: vec![2, 6] },
        vec![rand_t(&[3, 4])],
    )?;
    check(
        "transpose",
        Op::Transpose {
            perm: vec![2, 0, 1],
        },
        vec![rand_t(&[2, 3, 4])],
    )?;
    check(
        "embed_lookup",
        Op::EmbedLookup {
            indices: vec![1, 4, 1, 0],
        },
        vec![rand_t(&[6, 3])],
    )?;
    check(
        "concat",
        Op::Concat { axis: 1 },
        vec![rand_t(&[2, 3]), rand_t(&[2, 2])],
    )?;
    check(
        "contrastive_loss",
        Op::ContrastiveLoss { scale: 1.0 },
        vec![rand_t(&[3, 6]), rand_t(&[3, 6])],
    )?;
    Ok(results)
}
