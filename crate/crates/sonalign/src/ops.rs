//! Forward and backward rules for every primitive op.
//!
//! Forward rules are pure: output shape and values are a deterministic
//! function of the inputs. Backward rules take the recorded inputs, the
//! forward output, and the incoming gradient, and return one optional
//! gradient per input (`None` for inputs that never need one).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The primitive op set. Attributes that do not carry gradients
/// (strides, permutations, lookup indices) live on the op itself.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `[n,k] x [k,m]`, or batched `[b,n,k] x [b,k,m]` / `[b,n,k] x [k,m]`.
    MatMul,
    /// Input `[cin,h,w]`, kernel `[cout,cin,kh,kw]`, explicit stride and padding.
    Conv2d { stride: (usize, usize), pad: (usize, usize) },
    /// Elementwise; the smaller shape may be a suffix of the larger (bias add).
    Add,
    /// Elementwise; same suffix broadcasting as `Add`.
    Mul,
    /// Inputs `(x, gain, bias)`; normalizes the last axis.
    LayerNorm { eps: f64 },
    /// Softmax over the last axis.
    Softmax,
    Gelu,
    Sigmoid,
    /// Mean over one axis (axis removed from the shape).
    MeanPool { axis: usize },
    /// Max over one axis; ties route the gradient to the first maximum.
    MaxPool { axis: usize },
    Reshape { shape: Vec<usize> },
    /// General axis permutation.
    Transpose { perm: Vec<usize> },
    /// Input is the table `[vocab,d]`; output gathers `indices` rows.
    EmbedLookup { indices: Vec<usize> },
    Concat { axis: usize },
    /// Inputs `(audio [n,C], text [n,C])`; output is the scalar symmetric
    /// contrastive loss over the cosine-similarity matrix, logits scaled
    /// by `scale`.
    ContrastiveLoss { scale: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax => "softmax",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::MeanPool { .. } => "mean_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::EmbedLookup { .. } => "embed_lookup",
            Op::Concat { .. } => "concat",
            Op::ContrastiveLoss { .. } => "contrastive_loss",
        }
    }
}

fn arity_err(op: &Op, got: usize, want: &str) -> Error {
    Error::invalid(op.name(), format!("expected {} inputs, got {}", want, got))
}

pub fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::MatMul => {
            let [a, b] = two(op, inputs)?;
            matmul_forward(a, b)
        }
        Op::Conv2d { stride, pad } => {
            let [x, k] = two(op, inputs)?;
            conv2d_forward(x, k, *stride, *pad)
        }
        Op::Add => {
            let [a, b] = two(op, inputs)?;
            broadcast_binary(op, a, b, |x, y| x + y)
        }
        Op::Mul => {
            let [a, b] = two(op, inputs)?;
            broadcast_binary(op, a, b, |x, y| x * y)
        }
        Op::LayerNorm { eps } => {
            let [x, g, b] = three(op, inputs)?;
            layer_norm_forward(x, g, b, *eps)
        }
        Op::Softmax => softmax_forward(one(op, inputs)?),
        Op::Gelu => Ok(map_unary(one(op, inputs)?, gelu)),
        Op::Sigmoid => Ok(map_unary(one(op, inputs)?, sigmoid)),
        Op::MeanPool { axis } => pool_forward(op, one(op, inputs)?, *axis, true),
        Op::MaxPool { axis } => pool_forward(op, one(op, inputs)?, *axis, false),
        Op::Reshape { shape } => one(op, inputs)?.reshaped(shape.clone()),
        Op::Transpose { perm } => transpose_forward(one(op, inputs)?, perm),
        Op::EmbedLookup { indices } => embed_forward(one(op, inputs)?, indices),
        Op::Concat { axis } => concat_forward(inputs, *axis),
        Op::ContrastiveLoss { scale } => {
            let [a, t] = two(op, inputs)?;
            Ok(Tensor::scalar(contrastive_forward(a, t, *scale)?.loss))
        }
    }
}

pub fn backward(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    grad_out: &Tensor,
) -> Result<Vec<Option<Tensor>>> {
    match op {
        Op::MatMul => matmul_backward(inputs[0], inputs[1], grad_out),
        Op::Conv2d { stride, pad } => conv2d_backward(inputs[0], inputs[1], grad_out, *stride, *pad),
        Op::Add => {
            let ga = reduce_to_shape(grad_out, inputs[0].shape());
            let gb = reduce_to_shape(grad_out, inputs[1].shape());
            Ok(vec![Some(ga), Some(gb)])
        }
        Op::Mul => {
            let prod_a = broadcast_binary(op, grad_out, inputs[1], |x, y| x * y)?;
            let prod_b = broadcast_binary(op, grad_out, inputs[0], |x, y| x * y)?;
            Ok(vec![
                Some(reduce_to_shape(&prod_a, inputs[0].shape())),
                Some(reduce_to_shape(&prod_b, inputs[1].shape())),
            ])
        }
        Op::LayerNorm { eps } => layer_norm_backward(inputs[0], inputs[1], grad_out, *eps),
        Op::Softmax => softmax_backward(output, grad_out),
        Op::Gelu => Ok(vec![Some(map_binary(inputs[0], grad_out, |x, g| {
            g * gelu_prime(x)
        }))]),
        Op::Sigmoid => Ok(vec![Some(map_binary(output, grad_out, |s, g| {
            g * s * (1.0 - s)
        }))]),
        Op::MeanPool { axis } => mean_pool_backward(inputs[0], grad_out, *axis),
        Op::MaxPool { axis } => max_pool_backward(inputs[0], grad_out, *axis),
        Op::Reshape { .. } => Ok(vec![Some(
            grad_out.reshaped(inputs[0].shape().to_vec())?,
        )]),
        Op::Transpose { perm } => {
            let inv = invert_perm(perm);
            Ok(vec![Some(transpose_forward(grad_out, &inv)?)])
        }
        Op::EmbedLookup { indices } => embed_backward(inputs[0], grad_out, indices),
        Op::Concat { axis } => concat_backward(inputs, grad_out, *axis),
        Op::ContrastiveLoss { scale } => {
            contrastive_backward(inputs[0], inputs[1], *scale, grad_out.item())
        }
    }
}

fn one<'a>(op: &Op, inputs: &[&'a Tensor]) -> Result<&'a Tensor> {
    if inputs.len() != 1 {
        return Err(arity_err(op, inputs.len(), "1"));
    }
    Ok(inputs[0])
}

fn two<'a>(op: &Op, inputs: &[&'a Tensor]) -> Result<[&'a Tensor; 2]> {
    if inputs.len() != 2 {
        return Err(arity_err(op, inputs.len(), "2"));
    }
    Ok([inputs[0], inputs[1]])
}

fn three<'a>(op: &Op, inputs: &[&'a Tensor]) -> Result<[&'a Tensor; 3]> {
    if inputs.len() != 3 {
        return Err(arity_err(op, inputs.len(), "3"));
    }
    Ok([inputs[0], inputs[1], inputs[2]])
}

fn map_unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn map_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

// ---------------------------------------------------------------- matmul

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; m * n];
            matmul_2d(a.data(), b.data(), m, k, n, &mut out);
            Tensor::new(vec![m, n], out)
        }
        (3, 3) => {
            let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (bt2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
            if bt != bt2 || k != k2 {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; bt * m * n];
            for i in 0..bt {
                matmul_2d(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            Tensor::new(vec![bt, m, n], out)
        }
        (3, 2) => {
            let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; bt * m * n];
            matmul_2d(a.data(), b.data(), bt * m, k, n, &mut out);
            Tensor::new(vec![bt, m, n], out)
        }
        _ => Err(Error::shape("matmul", a.shape(), b.shape())),
    }
}

/// Row-major `[m,k] x [k,n]`, accumulated in ikj order so the inner loop
/// runs over contiguous slices.
pub fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `[m,k]^T x [m,n]` -> `[k,n]`, used by the backward rules.
fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `[m,k] x [n,k]^T` -> `[m,n]`.
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            matmul_a_bt(g.data(), b.data(), m, n, k, &mut ga);
            matmul_at_b(a.data(), g.data(), m, k, n, &mut gb);
            Ok(vec![
                Some(Tensor::new(vec![m, k], ga)?),
                Some(Tensor::new(vec![k, n], gb)?),
            ])
        }
        (3, 3) => {
            let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[2];
            let mut ga = vec![0.0; bt * m * k];
            let mut gb = vec![0.0; bt * k * n];
            for i in 0..bt {
                matmul_a_bt(
                    &g.data()[i * m * n..(i + 1) * m * n],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    m,
                    n,
                    k,
                    &mut ga[i * m * k..(i + 1) * m * k],
                );
                matmul_at_b(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &g.data()[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    &mut gb[i * k * n..(i + 1) * k * n],
                );
            }
            Ok(vec![
                Some(Tensor::new(a.shape().to_vec(), ga)?),
                Some(Tensor::new(b.shape().to_vec(), gb)?),
            ])
        }
        (3, 2) => {
            let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[1];
            let mut ga = vec![0.0; bt * m * k];
            let mut gb = vec![0.0; k * n];
            matmul_a_bt(g.data(), b.data(), bt * m, n, k, &mut ga);
            matmul_at_b(a.data(), g.data(), bt * m, k, n, &mut gb);
            Ok(vec![
                Some(Tensor::new(a.shape().to_vec(), ga)?),
                Some(Tensor::new(vec![k, n], gb)?),
            ])
        }
        _ => unreachable!("validated in forward"),
    }
}

// ---------------------------------------------------------------- conv2d

fn conv_out_extent(inp: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = inp + 2 * pad;
    if padded < k {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel extent {} exceeds padded input {}", k, padded),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn conv2d_forward(
    x: &Tensor,
    ker: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor> {
    if x.rank() != 3 || ker.rank() != 4 || x.shape()[0] != ker.shape()[1] {
        return Err(Error::shape("conv2d", x.shape(), ker.shape()));
    }
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (ker.shape()[0], ker.shape()[2], ker.shape()[3]);
    let oh = conv_out_extent(h, kh, stride.0, pad.0)?;
    let ow = conv_out_extent(w, kw, stride.1, pad.1)?;
    let mut out = vec![0.0; cout * oh * ow];
    let xd = x.data();
    let kd = ker.data();
    for oc in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ic in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xd[(ic * h + iy as usize) * w + ix as usize]
                                * kd[((oc * cin + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

fn conv2d_backward(
    x: &Tensor,
    ker: &Tensor,
    g: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Vec<Option<Tensor>>> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (ker.shape()[0], ker.shape()[2], ker.shape()[3]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let mut gx = vec![0.0; cin * h * w];
    let mut gk = vec![0.0; cout * cin * kh * kw];
    let xd = x.data();
    let kd = ker.data();
    let gd = g.data();
    for oc in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = gd[(oc * oh + oy) * ow + ox];
                if go == 0.0 {
                    continue;
                }
                for ic in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = (ic * h + iy as usize) * w + ix as usize;
                            let ki = ((oc * cin + ic) * kh + ky) * kw + kx;
                            gx[xi] += go * kd[ki];
                            gk[ki] += go * xd[xi];
                        }
                    }
                }
            }
        }
    }
    Ok(vec![
        Some(Tensor::new(x.shape().to_vec(), gx)?),
        Some(Tensor::new(ker.shape().to_vec(), gk)?),
    ])
}

// ---------------------------------------------------------------- broadcast add/mul

/// Elementwise with suffix broadcasting: shapes must be equal, or one shape
/// must equal the trailing axes of the other (a scalar broadcasts anywhere).
fn broadcast_binary(
    op: &Op,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(map_binary(a, b, f));
    }
    let (big, small, swapped) = if a.rank() >= b.rank() {
        (a, b, false)
    } else {
        (b, a, true)
    };
    if !is_suffix(small.shape(), big.shape()) {
        return Err(Error::shape(op.name(), a.shape(), b.shape()));
    }
    let period = small.numel().max(1);
    let data = big
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = small.data()[i % period];
            if swapped {
                f(y, x)
            } else {
                f(x, y)
            }
        })
        .collect();
    Tensor::new(big.shape().to_vec(), data)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Sum `g` down to `shape` (inverse of suffix broadcasting).
fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let period: usize = shape.iter().product::<usize>().max(1);
    let mut out = vec![0.0; period];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % period] += v;
    }
    Tensor::new(shape.to_vec(), out).expect("suffix reduction")
}

// ---------------------------------------------------------------- layer_norm

fn layer_norm_forward(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::invalid("layer_norm", "input must have rank >= 1"));
    }
    let d = *x.shape().last().unwrap();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let mut out = vec![0.0; x.numel()];
    for (row, orow) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            orow[j] = (row[j] - mean) * inv * gain.data()[j] + bias.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    g: &Tensor,
    eps: f64,
) -> Result<Vec<Option<Tensor>>> {
    let d = *x.shape().last().unwrap();
    let mut gx = vec![0.0; x.numel()];
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    for (r, (row, grow)) in x.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let base = r * d;
        // dy/dxhat = gain; standard layer-norm backward over the row.
        let mut sum_dg = 0.0;
        let mut sum_dgx = 0.0;
        for j in 0..d {
            let xhat = (row[j] - mean) * inv;
            let dgj = grow[j] * gain.data()[j];
            sum_dg += dgj;
            sum_dgx += dgj * xhat;
            gg[j] += grow[j] * xhat;
            gb[j] += grow[j];
        }
        for j in 0..d {
            let xhat = (row[j] - mean) * inv;
            let dgj = grow[j] * gain.data()[j];
            gx[base + j] = inv * (dgj - sum_dg / d as f64 - xhat * sum_dgx / d as f64);
        }
    }
    Ok(vec![
        Some(Tensor::new(x.shape().to_vec(), gx)?),
        Some(Tensor::new(vec![d], gg)?),
        Some(Tensor::new(vec![d], gb)?),
    ])
}

// ---------------------------------------------------------------- softmax

fn softmax_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::invalid("softmax", "input must have rank >= 1"));
    }
    let d = *x.shape().last().unwrap();
    let mut out = vec![0.0; x.numel()];
    for (row, orow) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..d {
            orow[j] = (row[j] - max).exp();
            z += orow[j];
        }
        for v in orow.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn softmax_backward(y: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let d = *y.shape().last().unwrap();
    let mut gx = vec![0.0; y.numel()];
    for ((yrow, grow), xrow) in y
        .data()
        .chunks(d)
        .zip(g.data().chunks(d))
        .zip(gx.chunks_mut(d))
    {
        let dot: f64 = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
        for j in 0..d {
            xrow[j] = yrow[j] * (grow[j] - dot);
        }
    }
    Ok(vec![Some(Tensor::new(y.shape().to_vec(), gx)?)])
}

// ---------------------------------------------------------------- activations

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_C: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------- pooling

fn pool_axes(t: &Tensor, axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= t.rank() {
        return Err(Error::invalid(
            "pool",
            format!("axis {} out of range for shape {:?}", axis, t.shape()),
        ));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let len = t.shape()[axis];
    let inner: usize = t.shape()[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

fn pooled_shape(t: &Tensor, axis: usize) -> Vec<usize> {
    let mut s = t.shape().to_vec();
    s.remove(axis);
    s
}

fn pool_forward(op: &Op, t: &Tensor, axis: usize, mean: bool) -> Result<Tensor> {
    let (outer, len, inner) = pool_axes(t, axis)?;
    if len == 0 {
        return Err(Error::invalid(op.name(), "cannot pool over empty axis"));
    }
    let mut out = vec![if mean { 0.0 } else { f64::NEG_INFINITY }; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                let v = t.data()[(o * len + l) * inner + i];
                let slot = &mut out[o * inner + i];
                if mean {
                    *slot += v;
                } else if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    if mean {
        for v in out.iter_mut() {
            *v /= len as f64;
        }
    }
    Tensor::new(pooled_shape(t, axis), out)
}

fn mean_pool_backward(x: &Tensor, g: &Tensor, axis: usize) -> Result<Vec<Option<Tensor>>> {
    let (outer, len, inner) = pool_axes(x, axis)?;
    let mut gx = vec![0.0; x.numel()];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                gx[(o * len + l) * inner + i] = g.data()[o * inner + i] / len as f64;
            }
        }
    }
    Ok(vec![Some(Tensor::new(x.shape().to_vec(), gx)?)])
}

fn max_pool_backward(x: &Tensor, g: &Tensor, axis: usize) -> Result<Vec<Option<Tensor>>> {
    let (outer, len, inner) = pool_axes(x, axis)?;
    let mut gx = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let mut best = f64::NEG_INFINITY;
            let mut best_l = 0;
            for l in 0..len {
                let v = x.data()[(o * len + l) * inner + i];
                if v > best {
                    best = v;
                    best_l = l;
                }
            }
            gx[(o * len + best_l) * inner + i] = g.data()[o * inner + i];
        }
    }
    Ok(vec![Some(Tensor::new(x.shape().to_vec(), gx)?)])
}

// ---------------------------------------------------------------- transpose

fn transpose_forward(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let r = t.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(
            "transpose",
            format!("invalid permutation {:?} for rank {}", perm, r),
        ));
    }
    let in_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let strides_for_out: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; t.numel()];
    let mut idx = vec![0usize; r];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (i, &ix) in idx.iter().enumerate() {
            src += ix * strides_for_out[i];
        }
        *slot = t.data()[src];
        for i in (0..r).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ---------------------------------------------------------------- embed / concat

fn embed_forward(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(Error::invalid("embed_lookup", "table must be [vocab, dim]"));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(indices.len() * d);
    for &ix in indices {
        if ix >= v {
            return Err(Error::invalid(
                "embed_lookup",
                format!("index {} out of vocab {}", ix, v),
            ));
        }
        out.extend_from_slice(&table.data()[ix * d..(ix + 1) * d]);
    }
    Tensor::new(vec![indices.len(), d], out)
}

fn embed_backward(table: &Tensor, g: &Tensor, indices: &[usize]) -> Result<Vec<Option<Tensor>>> {
    let d = table.shape()[1];
    let mut gt = vec![0.0; table.numel()];
    for (row, &ix) in indices.iter().enumerate() {
        for j in 0..d {
            gt[ix * d + j] += g.data()[row * d + j];
        }
    }
    Ok(vec![Some(Tensor::new(table.shape().to_vec(), gt)?)])
}

fn concat_forward(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::invalid("concat", "needs at least one input"));
    }
    let first = inputs[0];
    if axis >= first.rank() {
        return Err(Error::invalid("concat", format!("axis {} out of range", axis)));
    }
    for t in &inputs[1..] {
        if t.rank() != first.rank()
            || t.shape()
                .iter()
                .enumerate()
                .any(|(i, &e)| i != axis && e != first.shape()[i])
        {
            return Err(Error::shape("concat", first.shape(), t.shape()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for t in inputs {
            let len = t.shape()[axis];
            let start = o * len * inner;
            out.extend_from_slice(&t.data()[start..start + len * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Tensor::new(shape, out)
}

fn concat_backward(inputs: &[&Tensor], g: &Tensor, axis: usize) -> Result<Vec<Option<Tensor>>> {
    let first = inputs[0];
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut grads: Vec<Vec<f64>> = inputs.iter().map(|t| vec![0.0; t.numel()]).collect();
    for o in 0..outer {
        let mut offset = o * total_axis * inner;
        for (t, gt) in inputs.iter().zip(grads.iter_mut()) {
            let len = t.shape()[axis] * inner;
            gt[o * len..(o + 1) * len].copy_from_slice(&g.data()[offset..offset + len]);
            offset += len;
        }
    }
    Ok(inputs
        .iter()
        .zip(grads)
        .map(|(t, gd)| Some(Tensor::new(t.shape().to_vec(), gd).expect("same shape")))
        .collect())
}

// ---------------------------------------------------------------- contrastive loss

pub(crate) struct ContrastiveParts {
    pub loss: f64,
    /// Row-normalized audio embeddings, `[n,C]`.
    pub a_hat: Vec<f64>,
    /// Row-normalized text embeddings, `[n,C]`.
    pub t_hat: Vec<f64>,
    pub a_norms: Vec<f64>,
    pub t_norms: Vec<f64>,
    /// Row-wise softmax of `scale * S`, `[n,n]`.
    pub p_row: Vec<f64>,
    /// Column-wise softmax of `scale * S` (rows of softmax over S^T), `[n,n]`.
    pub p_col: Vec<f64>,
}

pub(crate) fn contrastive_forward(a: &Tensor, t: &Tensor, scale: f64) -> Result<ContrastiveParts> {
    if a.rank() != 2 || a.shape() != t.shape() {
        return Err(Error::shape("contrastive_loss", a.shape(), t.shape()));
    }
    if scale <= 0.0 {
        return Err(Error::invalid("contrastive_loss", "scale must be > 0"));
    }
    let (n, c) = (a.shape()[0], a.shape()[1]);
    let normalize = |data: &[f64], which: &str| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut hat = vec![0.0; n * c];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let row = &data[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateEmbedding { index: i });
            }
            norms[i] = norm;
            for j in 0..c {
                hat[i * c + j] = row[j] / norm;
            }
            let _ = which;
        }
        Ok((hat, norms))
    };
    let (a_hat, a_norms) = normalize(a.data(), "audio")?;
    let (t_hat, t_norms) = normalize(t.data(), "text")?;

    // S = A_hat T_hat^T, cosine similarities.
    let mut s = vec![0.0; n * n];
    matmul_a_bt(&a_hat, &t_hat, n, c, n, &mut s);

    let softmax_rows = |m: &[f64], transpose: bool| -> (Vec<f64>, f64) {
        let mut p = vec![0.0; n * n];
        let mut ce = 0.0;
        for i in 0..n {
            let get = |j: usize| scale * if transpose { m[j * n + i] } else { m[i * n + j] };
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                max = max.max(get(j));
            }
            let mut z = 0.0;
            for j in 0..n {
                let e = (get(j) - max).exp();
                p[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                p[i * n + j] /= z;
            }
            ce += -(get(i) - max - z.ln());
        }
        (p, ce / n as f64)
    };
    let (p_row, ce_row) = softmax_rows(&s, false);
    let (p_col, ce_col) = softmax_rows(&s, true);
    Ok(ContrastiveParts {
        loss: 0.5 * (ce_row + ce_col),
        a_hat,
        t_hat,
        a_norms,
        t_norms,
        p_row,
        p_col,
    })
}

fn contrastive_backward(
    a: &Tensor,
    t: &Tensor,
    scale: f64,
    upstream: f64,
) -> Result<Vec<Option<Tensor>>> {
    let parts = contrastive_forward(a, t, scale)?;
    let (n, c) = (a.shape()[0], a.shape()[1]);
    // dL/dS_ij = scale/(2n) * [(P_row - I) + (P_col^T - I)]_ij
    let mut gs = vec![0.0; n * n];
    let coeff = upstream * scale / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 2.0 } else { 0.0 };
            gs[i * n + j] = coeff * (parts.p_row[i * n + j] + parts.p_col[j * n + i] - delta);
        }
    }
    // dL/dA_hat = G T_hat ; dL/dT_hat = G^T A_hat
    let mut g_ahat = vec![0.0; n * c];
    let mut g_that = vec![0.0; n * c];
    matmul_2d(&gs, &parts.t_hat, n, n, c, &mut g_ahat);
    matmul_at_b(&gs, &parts.a_hat, n, n, c, &mut g_that);
    // Through row normalization: dA_i = (g - (g . a_hat) a_hat) / |A_i|
    let unnormalize = |g_hat: &[f64], hat: &[f64], norms: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let gh = &g_hat[i * c..(i + 1) * c];
            let h = &hat[i * c..(i + 1) * c];
            let dot: f64 = gh.iter().zip(h).map(|(&x, &y)| x * y).sum();
            for j in 0..c {
                out[i * c + j] = (gh[j] - dot * h[j]) / norms[i];
            }
        }
        out
    };
    let ga = unnormalize(&g_ahat, &parts.a_hat, &parts.a_norms);
    let gt = unnormalize(&g_that, &parts.t_hat, &parts.t_norms);
    Ok(vec![
        Some(Tensor::new(vec![n, c], ga)?),
        Some(Tensor::new(vec![n, c], gt)?),
    ])
}
