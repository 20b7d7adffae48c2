//! Forward and backward kernels for the network layers: 2-d convolution
//! (cross-correlation, no kernel flip), max pooling, global average pooling,
//! elementwise activations, and the softmax cross-entropy head.
//!
//! Every backward kernel is the vector-Jacobian product of its forward
//! counterpart; gradient tests check each one against 64-bit central finite
//! differences.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::{fl, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Padding::Same => write!(f, "same"),
            Padding::Valid => write!(f, "valid"),
        }
    }
}

impl FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(Error::InvalidArg {
                op: "padding",
                msg: format!("unknown padding {other:?} (expected same|valid)"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::Sigmoid => write!(f, "sigmoid"),
            Activation::Tanh => write!(f, "tanh"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArg {
                op: "activation",
                msg: format!("unknown activation kind {other:?} (expected relu|sigmoid|tanh)"),
            }),
        }
    }
}

/// Elementwise activation.
pub fn activation<T: Scalar>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| activate(kind, v))
}

#[inline]
pub fn activate<T: Scalar>(kind: Activation, v: T) -> T {
    match kind {
        Activation::Relu => {
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        }
        Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
        Activation::Tanh => v.tanh(),
    }
}

/// VJP of `activation` at the recorded pre-activation values.
pub fn activation_vjp<T: Scalar>(
    kind: Activation,
    pre: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    pre.zip_map(upstream, "activation_vjp", |x, up| up * activate_grad(kind, x))
}

#[inline]
pub fn activate_grad<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Sigmoid => {
            let s = T::one() / (T::one() + (-x).exp());
            s * (T::one() - s)
        }
        Activation::Tanh => {
            let t = x.tanh();
            T::one() - t * t
        }
    }
}

/// Output spatial size plus leading pad for one dimension.
fn out_dim(extent: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(extent);
            // Extra cell of odd padding goes on the bottom/right.
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if kernel > extent {
                return Err(Error::InvalidArg {
                    op: "conv2d",
                    msg: format!("kernel {kernel} larger than input extent {extent} with valid padding"),
                });
            }
            Ok(((extent - kernel) / stride + 1, 0))
        }
    }
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize, usize, usize)> {
    if input.rank() != 4 || filters.rank() != 4 || input.dim(1) != filters.dim(1) {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: filters.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArg {
            op: "conv2d",
            msg: "stride must be at least 1".into(),
        });
    }
    let (oh, pad_top) = out_dim(input.dim(2), filters.dim(2), stride, padding)?;
    let (ow, pad_left) = out_dim(input.dim(3), filters.dim(3), stride, padding)?;
    Ok((oh, ow, pad_top, pad_left))
}

/// 2-d cross-correlation of `input: [B, C, H, W]` with `filters: [O, C, kh, kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (oh, ow, pad_top, pad_left) = conv_geometry(input, filters, stride, padding)?;
    let (batch, chans, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (outc, _, kh, kw) = (filters.dim(0), filters.dim(1), filters.dim(2), filters.dim(3));

    let mut out = vec![T::zero(); batch * outc * oh * ow];
    let ind = input.data();
    let fd = filters.data();
    for b in 0..batch {
        for o in 0..outc {
            let out_base = (b * outc + o) * oh * ow;
            for c in 0..chans {
                let in_base = (b * chans + c) * h * w;
                let f_base = (o * chans + c) * kh * kw;
                for r in 0..kh {
                    for s in 0..kw {
                        let weight = fd[f_base + r * kw + s];
                        for i in 0..oh {
                            let ih = (i * stride + r) as isize - pad_top as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let row = in_base + ih as usize * w;
                            for j in 0..ow {
                                let iw = (j * stride + s) as isize - pad_left as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                out[out_base + i * ow + j] += weight * ind[row + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![batch, outc, oh, ow], out)
}

/// VJP of `conv2d`: gradients with respect to the input and the filters.
pub fn conv2d_vjp<T: Scalar>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    stride: usize,
    padding: Padding,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (oh, ow, pad_top, pad_left) = conv_geometry(input, filters, stride, padding)?;
    let (batch, chans, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (outc, _, kh, kw) = (filters.dim(0), filters.dim(1), filters.dim(2), filters.dim(3));
    if upstream.shape() != [batch, outc, oh, ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_vjp",
            lhs: upstream.shape().to_vec(),
            rhs: vec![batch, outc, oh, ow],
        });
    }

    let mut dinput = vec![T::zero(); input.len()];
    let mut dfilters = vec![T::zero(); filters.len()];
    let ind = input.data();
    let fd = filters.data();
    let ud = upstream.data();
    for b in 0..batch {
        for o in 0..outc {
            let up_base = (b * outc + o) * oh * ow;
            for c in 0..chans {
                let in_base = (b * chans + c) * h * w;
                let f_base = (o * chans + c) * kh * kw;
                for r in 0..kh {
                    for s in 0..kw {
                        let weight = fd[f_base + r * kw + s];
                        let mut wgrad = T::zero();
                        for i in 0..oh {
                            let ih = (i * stride + r) as isize - pad_top as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let row = in_base + ih as usize * w;
                            for j in 0..ow {
                                let iw = (j * stride + s) as isize - pad_left as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let up = ud[up_base + i * ow + j];
                                dinput[row + iw as usize] += weight * up;
                                wgrad += up * ind[row + iw as usize];
                            }
                        }
                        dfilters[f_base + r * kw + s] += wgrad;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(input.shape().to_vec(), dinput)?,
        Tensor::from_vec(filters.shape().to_vec(), dfilters)?,
    ))
}

/// Forward state of a max-pool: the flat input index that won each window.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Max pooling over `[B, C, H, W]` with SAME padding semantics: output size is
/// `ceil(extent / stride)` and out-of-bounds cells never win a max.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    maxpool2d_forward(input, window, stride).map(|(out, _)| out)
}

/// Like [`maxpool2d`] but also records argmax positions for the backward pass.
pub fn maxpool2d_forward<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolIndices)> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArg {
            op: "maxpool2d",
            msg: format!("window ({window}) and stride ({stride}) must be positive"),
        });
    }
    if input.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d",
            lhs: input.shape().to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let (batch, chans, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (oh, pad_top) = out_dim(h, window, stride, Padding::Same)?;
    let (ow, pad_left) = out_dim(w, window, stride, Padding::Same)?;

    let mut out = vec![T::zero(); batch * chans * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    let ind = input.data();
    for b in 0..batch {
        for c in 0..chans {
            let in_base = (b * chans + c) * h * w;
            let out_base = (b * chans + c) * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for r in 0..window {
                        let ih = (i * stride + r) as isize - pad_top as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for s in 0..window {
                            let iw = (j * stride + s) as isize - pad_left as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = in_base + ih as usize * w + iw as usize;
                            // Strict > keeps the first maximum in scan order on ties.
                            if ind[idx] > best || best_idx == usize::MAX {
                                best = ind[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[out_base + i * ow + j] = best;
                    argmax[out_base + i * ow + j] = best_idx;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(vec![batch, chans, oh, ow], out)?,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// VJP of max pooling: upstream gradient routes to each window's argmax cell.
pub fn maxpool2d_vjp<T: Scalar>(indices: &PoolIndices, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.len() != indices.argmax.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d_vjp",
            lhs: upstream.shape().to_vec(),
            rhs: vec![indices.argmax.len()],
        });
    }
    let mut dinput = Tensor::zeros(&indices.input_shape);
    let dd = dinput.data_mut();
    for (&idx, &up) in indices.argmax.iter().zip(upstream.data()) {
        dd[idx] += up;
    }
    Ok(dinput)
}

/// Mean over the spatial dimensions of `[B, C, H, W]`, producing `[B, C]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool",
            lhs: input.shape().to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let (batch, chans, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let area = fl::<T>((h * w) as f64);
    let mut out = vec![T::zero(); batch * chans];
    let ind = input.data();
    for bc in 0..batch * chans {
        let mut acc = T::zero();
        for &v in &ind[bc * h * w..(bc + 1) * h * w] {
            acc += v;
        }
        out[bc] = acc / area;
    }
    Tensor::from_vec(vec![batch, chans], out)
}

/// VJP of `global_avg_pool`: spreads each upstream value evenly over its map.
pub fn global_avg_pool_vjp<T: Scalar>(
    input_shape: &[usize],
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, chans, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    if upstream.shape() != [batch, chans] {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_vjp",
            lhs: upstream.shape().to_vec(),
            rhs: vec![batch, chans],
        });
    }
    let area = fl::<T>((h * w) as f64);
    let mut dinput = Tensor::zeros(input_shape);
    let dd = dinput.data_mut();
    for (bc, &up) in upstream.data().iter().enumerate() {
        let g = up / area;
        for v in &mut dd[bc * h * w..(bc + 1) * h * w] {
            *v = g;
        }
    }
    Ok(dinput)
}

/// Mean negative log-likelihood of `logits: [B, K]` against class indices,
/// computed through max-shifted log-sum-exp. Also returns the probabilities.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (batch, classes) = (logits.dim(0), logits.dim(1));
    let mut probs = vec![T::zero(); batch * classes];
    let mut loss = T::zero();
    let ld = logits.data();
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                row: b,
                label,
                classes,
            });
        }
        let row = &ld[b * classes..(b + 1) * classes];
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (k, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[b * classes + k] = e;
            sum += e;
        }
        for p in &mut probs[b * classes..(b + 1) * classes] {
            *p /= sum;
        }
        loss = loss + sum.ln() + max - row[label];
    }
    loss /= fl::<T>(batch as f64);
    Ok((loss, Tensor::from_vec(vec![batch, classes], probs)?))
}

/// Gradient of the mean cross-entropy loss with respect to the logits:
/// `(probs - onehot(labels)) / batch`.
pub fn softmax_cross_entropy_vjp<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    if probs.rank() != 2 || probs.dim(0) != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy_vjp",
            lhs: probs.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let batch = probs.dim(0);
    let classes = probs.dim(1);
    let inv_batch = T::one() / fl::<T>(batch as f64);
    let mut grad = probs.scale(inv_batch);
    let gd = grad.data_mut();
    for (b, &label) in labels.iter().enumerate() {
        gd[b * classes + label] -= inv_batch;
    }
    Ok(grad)
}
