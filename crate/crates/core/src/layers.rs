//! Layer types. Grouped layers carry `group_size` member nodes per logical
//! output; training masks select members per sample, and `combine` collapses
//! each group into a single plain node for inference.
//!
//! Forward passes return a state value holding everything the matching
//! backward pass needs, so gradients can only be computed for an actually
//! recorded forward.

use rand::Rng;

use crate::bagging::{combine_group, group_reduce, weight_average, GroupSpec, MaskBatch};
use crate::error::{Error, Result};
use crate::ops::{
    activation, activation_vjp, conv2d, conv2d_vjp, Activation, Padding,
};
use crate::rng::uniform_tensor;
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Uniform initialization limit with fan-out counted as the logical width
/// (the group count), not the member count.
pub fn init_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Gradients of one parameterized layer.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub dweights: Tensor<T>,
    pub dbiases: Tensor<T>,
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

/// A bagged fully connected layer: `group_count` logical outputs, each backed
/// by `group_size` member nodes. Weights are `[k, n, fan_in]`, biases `[k, n]`.
#[derive(Debug, Clone)]
pub struct DenseGrouped<T> {
    pub spec: GroupSpec,
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct DenseGroupedState<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    mask: MaskBatch<T>,
}

impl<T: Scalar> DenseGrouped<T> {
    /// Draws one weight vector per group (uniform in ±`init_limit`), replicates
    /// it across the group's members, and zeroes the biases. All members of a
    /// group start bit-identical.
    pub fn init(fan_in: usize, spec: GroupSpec, kind: Activation, rng: &mut impl Rng) -> Self {
        let (k, n) = (spec.group_count(), spec.group_size());
        let limit = init_limit(fan_in, k);
        let mut weights = Tensor::zeros(&[k, n, fan_in]);
        for i in 0..k {
            let draw = uniform_tensor::<T>(&[fan_in], limit, rng);
            for j in 0..n {
                let base = (i * n + j) * fan_in;
                weights.data_mut()[base..base + fan_in].copy_from_slice(draw.data());
            }
        }
        Self {
            spec,
            weights,
            biases: Tensor::zeros(&[k, n]),
            activation: kind,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.dim(2)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    /// Member pre-activations for a batch: `[batch, k, n]`.
    pub fn member_pre_activations(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, n) = (self.spec.group_count(), self.spec.group_size());
        let fan_in = self.fan_in();
        if input.rank() != 2 || input.dim(1) != fan_in {
            return Err(Error::ShapeMismatch {
                op: "dense_grouped",
                lhs: input.shape().to_vec(),
                rhs: vec![0, fan_in],
            });
        }
        let flat_w = self.weights.clone().reshape(vec![k * n, fan_in])?;
        let mut pre = matmul_nt(input, &flat_w)?;
        let batch = input.dim(0);
        for b in 0..batch {
            for u in 0..k * n {
                pre.data_mut()[b * k * n + u] += self.biases.data()[u];
            }
        }
        pre.reshape(vec![batch, k, n])
    }

    pub fn forward_train(
        &self,
        input: &Tensor<T>,
        mask: &MaskBatch<T>,
    ) -> Result<(Tensor<T>, DenseGroupedState<T>)> {
        let pre = self.member_pre_activations(input)?;
        if mask.batch() != input.dim(0)
            || mask.group_count() != self.spec.group_count()
            || mask.group_size() != self.spec.group_size()
        {
            return Err(Error::ShapeMismatch {
                op: "dense_grouped_mask",
                lhs: mask.values().shape().to_vec(),
                rhs: vec![
                    input.dim(0),
                    self.spec.group_count(),
                    self.spec.group_size(),
                ],
            });
        }
        let activated = activation(self.activation, &pre);
        let out = group_reduce(&activated, mask)?;
        Ok((
            out,
            DenseGroupedState {
                input: input.clone(),
                pre,
                mask: mask.clone(),
            },
        ))
    }

    /// Gradients for every member parameter and the input. Members masked out
    /// for a sample receive exactly zero gradient from that sample.
    pub fn backward_train(
        &self,
        state: &DenseGroupedState<T>,
        upstream: &Tensor<T>,
    ) -> Result<(ParamGrads<T>, Tensor<T>)> {
        let (k, n) = (self.spec.group_count(), self.spec.group_size());
        let batch = state.input.dim(0);
        if upstream.shape() != [batch, k] {
            return Err(Error::ShapeMismatch {
                op: "dense_grouped_backward",
                lhs: upstream.shape().to_vec(),
                rhs: vec![batch, k],
            });
        }
        // d activated[b, i, j] = upstream[b, i] * mask[b, i, j]
        let mut dact = Tensor::zeros(&[batch, k, n]);
        {
            let dd = dact.data_mut();
            let md = state.mask.values().data();
            let ud = upstream.data();
            for b in 0..batch {
                for i in 0..k {
                    let up = ud[b * k + i];
                    for j in 0..n {
                        let idx = (b * k + i) * n + j;
                        dd[idx] = up * md[idx];
                    }
                }
            }
        }
        let dpre = activation_vjp(self.activation, &state.pre, &dact)?;
        let dpre_flat = dpre.reshape(vec![batch, k * n])?;
        let dweights = matmul_tn(&dpre_flat, &state.input)?.reshape(vec![k, n, self.fan_in()])?;
        let mut dbiases = Tensor::zeros(&[k, n]);
        for b in 0..batch {
            for u in 0..k * n {
                dbiases.data_mut()[u] += dpre_flat.data()[b * k * n + u];
            }
        }
        let flat_w = self.weights.clone().reshape(vec![k * n, self.fan_in()])?;
        let dinput = matmul(&dpre_flat, &flat_w)?;
        Ok((ParamGrads { dweights, dbiases }, dinput))
    }

    /// Collapses every group into one plain node (Eq. combined weights:
    /// expected-keep times the member sum).
    pub fn combine(&self) -> DensePlain<T> {
        let (weights, biases) =
            combine_group(&self.weights, &self.biases, &self.spec).expect("shapes valid");
        DensePlain {
            weights,
            biases,
            activation: Some(self.activation),
        }
    }

    /// Replaces every member by its group mean (weights, biases).
    pub fn average_members(&mut self) {
        let (w, b) = weight_average(&self.weights, &self.biases).expect("shapes valid");
        self.weights = w;
        self.biases = b;
    }

    /// Plain layer using only member `j` of each group (diagnostic).
    pub fn member_layer(&self, j: usize) -> DensePlain<T> {
        let (k, n) = (self.spec.group_count(), self.spec.group_size());
        let fan_in = self.fan_in();
        let mut weights = Tensor::zeros(&[k, fan_in]);
        let mut biases = Tensor::zeros(&[k]);
        for i in 0..k {
            let src = (i * n + j) * fan_in;
            weights.data_mut()[i * fan_in..(i + 1) * fan_in]
                .copy_from_slice(&self.weights.data()[src..src + fan_in]);
            biases.data_mut()[i] = self.biases.at2(i, j);
        }
        DensePlain {
            weights,
            biases,
            activation: Some(self.activation),
        }
    }
}

/// An ordinary fully connected layer: weights `[out, fan_in]`, biases `[out]`.
/// `activation: None` is the logits head.
#[derive(Debug, Clone)]
pub struct DensePlain<T> {
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone)]
pub struct DensePlainState<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
}

impl<T: Scalar> DensePlain<T> {
    /// Same draw protocol as [`DenseGrouped::init`] with group size 1, so a
    /// plain layer and a grouped layer built from the same stream start
    /// bit-identical.
    pub fn init(
        fan_in: usize,
        out: usize,
        kind: Option<Activation>,
        rng: &mut impl Rng,
    ) -> Self {
        let limit = init_limit(fan_in, out);
        let mut weights = Tensor::zeros(&[out, fan_in]);
        for o in 0..out {
            let draw = uniform_tensor::<T>(&[fan_in], limit, rng);
            weights.data_mut()[o * fan_in..(o + 1) * fan_in].copy_from_slice(draw.data());
        }
        Self {
            weights,
            biases: Tensor::zeros(&[out]),
            activation: kind,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.dim(1)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, state) = self.forward_train(input)?;
        drop(state);
        Ok(out)
    }

    pub fn forward_train(&self, input: &Tensor<T>) -> Result<(Tensor<T>, DensePlainState<T>)> {
        if input.rank() != 2 || input.dim(1) != self.fan_in() {
            return Err(Error::ShapeMismatch {
                op: "dense_plain",
                lhs: input.shape().to_vec(),
                rhs: vec![0, self.fan_in()],
            });
        }
        let batch = input.dim(0);
        let out_n = self.weights.dim(0);
        let mut pre = matmul_nt(input, &self.weights)?;
        for b in 0..batch {
            for o in 0..out_n {
                pre.data_mut()[b * out_n + o] += self.biases.data()[o];
            }
        }
        let out = match self.activation {
            Some(kind) => activation(kind, &pre),
            None => pre.clone(),
        };
        Ok((
            out,
            DensePlainState {
                input: input.clone(),
                pre,
            },
        ))
    }

    pub fn backward_train(
        &self,
        state: &DensePlainState<T>,
        upstream: &Tensor<T>,
    ) -> Result<(ParamGrads<T>, Tensor<T>)> {
        let dpre = match self.activation {
            Some(kind) => activation_vjp(kind, &state.pre, upstream)?,
            None => upstream.clone(),
        };
        let dweights = matmul_tn(&dpre, &state.input)?;
        let out_n = self.weights.dim(0);
        let mut dbiases = Tensor::zeros(&[out_n]);
        for b in 0..dpre.dim(0) {
            for o in 0..out_n {
                dbiases.data_mut()[o] += dpre.data()[b * out_n + o];
            }
        }
        let dinput = matmul(&dpre, &self.weights)?;
        Ok((ParamGrads { dweights, dbiases }, dinput))
    }
}

// ---------------------------------------------------------------------------
// Convolution layers
// ---------------------------------------------------------------------------

/// A bagged convolution layer. A member is one filter; the group's sampled
/// output is one feature map, and one mask entry gates a member's entire map
/// for that sample. Filters are `[k, n, c, kh, kw]`, biases `[k, n]`.
#[derive(Debug, Clone)]
pub struct ConvGrouped<T> {
    pub spec: GroupSpec,
    pub filters: Tensor<T>,
    pub biases: Tensor<T>,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct ConvGroupedState<T> {
    input: Tensor<T>,
    pre: Tensor<T>, // [batch, k*n, oh, ow]
    mask: MaskBatch<T>,
}

impl<T: Scalar> ConvGrouped<T> {
    pub fn init(
        in_channels: usize,
        kernel: (usize, usize),
        spec: GroupSpec,
        stride: usize,
        padding: Padding,
        kind: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let (k, n) = (spec.group_count(), spec.group_size());
        let (kh, kw) = kernel;
        let fan_in = in_channels * kh * kw;
        let limit = init_limit(fan_in, k);
        let mut filters = Tensor::zeros(&[k, n, in_channels, kh, kw]);
        for i in 0..k {
            let draw = uniform_tensor::<T>(&[fan_in], limit, rng);
            for j in 0..n {
                let base = (i * n + j) * fan_in;
                filters.data_mut()[base..base + fan_in].copy_from_slice(draw.data());
            }
        }
        Self {
            spec,
            filters,
            biases: Tensor::zeros(&[k, n]),
            stride,
            padding,
            activation: kind,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.filters.dim(2)
    }

    pub fn param_count(&self) -> usize {
        self.filters.len() + self.biases.len()
    }

    fn flat_filters(&self) -> Result<Tensor<T>> {
        let s = self.filters.shape().to_vec();
        self.filters
            .clone()
            .reshape(vec![s[0] * s[1], s[2], s[3], s[4]])
    }

    /// Member pre-activation maps: `[batch, k*n, oh, ow]`.
    pub fn member_pre_activations(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let flat = self.flat_filters()?;
        let mut pre = conv2d(input, &flat, self.stride, self.padding)?;
        let units = flat.dim(0);
        let map = pre.dim(2) * pre.dim(3);
        let batch = pre.dim(0);
        for b in 0..batch {
            for u in 0..units {
                let bias = self.biases.data()[u];
                let base = (b * units + u) * map;
                for v in &mut pre.data_mut()[base..base + map] {
                    *v += bias;
                }
            }
        }
        Ok(pre)
    }

    pub fn forward_train(
        &self,
        input: &Tensor<T>,
        mask: &MaskBatch<T>,
    ) -> Result<(Tensor<T>, ConvGroupedState<T>)> {
        let (k, n) = (self.spec.group_count(), self.spec.group_size());
        if mask.batch() != input.dim(0) || mask.group_count() != k || mask.group_size() != n {
            return Err(Error::ShapeMismatch {
                op: "conv_grouped_mask",
                lhs: mask.values().shape().to_vec(),
                rhs: vec![input.dim(0), k, n],
            });
        }
        let pre = self.member_pre_activations(input)?;
        let (batch, oh, ow) = (pre.dim(0), pre.dim(2), pre.dim(3));
        let activated = activation(self.activation, &pre)
            .reshape(vec![batch, k, n, oh, ow])?;
        let out = group_reduce(&activated, mask)?;
        Ok((
            out,
            ConvGroupedState {
                input: input.clone(),
                pre,
                mask: mask.clone(),
            },
        ))
    }

    pub fn backward_train(
        &self,
        state: &ConvGroupedState<T>,
        upstream: &Tensor<T>,
    ) -> Result<(ParamGrads<T>, Tensor<T>)> {
        let (k, n) = (self.spec.group_count(), self.spec.group_size());
        let (batch, oh, ow) = (state.pre.dim(0), state.pre.dim(2), state.pre.dim(3));
        if upstream.shape() != [batch, k, oh, ow] {
            return Err(Error::ShapeMismatch {
                op: "conv_grouped_backward",
                lhs: upstream.shape().to_vec(),
                rhs: vec![batch, k, oh, ow],
            });
        }
        let map = oh * ow;
        // d activated[b, (i, j), :, :] = upstream[b, i, :, :] * mask[b, i, j]
        let mut dact = Tensor::zeros(&[batch, k * n, oh, ow]);
        {
            let dd = dact.data_mut();
            let md = state.mask.values().data();
            let ud = upstream.data();
            for b in 0..batch {
                for i in 0..k {
                    let up_base = (b * k + i) * map;
                    for j in 0..n {
                        let m = md[(b * k + i) * n + j];
                        if m == T::zero() {
                            continue;
                        }
                        let base = (b * k * n + i * n + j) * map;
                        for e in 0..map {
                            dd[base + e] = m * ud[up_base + e];
                        }
                    }
                }
            }
        }
        let dpre = activation_vjp(self.activation, &state.pre, &dact)?;
        let mut dbiases = Tensor::zeros(&[k, n]);
        for b in 0..batch {
            for u in 0..k * n {
                let base = (b * k * n + u) * map;
                let mut acc = T::zero();
                for e in 0..map {
                    acc += dpre.data()[base + e];
                }
                dbiases.data_mut()[u] += acc;
            }
        }
        let flat = self.flat_filters()?;
        let (dinput, dfilters_flat) =
            conv2d_vjp(&state.input, &flat, self.stride, self.padding, &dpre)?;
        let dweights = dfilters_flat.reshape(self.filters.shape().to_vec())?;
        Ok((ParamGrads { dweights, dbiases }, dinput))
    }

    pub fn combine(&self) -> ConvPlain<T> {
        let shape = self.filters.shape().to_vec();
        let as_members = self
            .filters
            .clone()
            .reshape(vec![shape[0], shape[1], shape[2] * shape[3] * shape[4]])
            .expect("filters contiguous");
        let (weights, biases) =
            combine_group(&as_members, &self.biases, &self.spec).expect("shapes valid");
        ConvPlain {
            filters: weights
                .reshape(vec![shape[0], shape[2], shape[3], shape[4]])
                .expect("combined shape"),
            biases,
            stride: self.stride,
            padding: self.padding,
            activation: Some(self.activation),
        }
    }

    pub fn average_members(&mut self) {
        let shape = self.filters.shape().to_vec();
        let as_members = self
            .filters
            .clone()
            .reshape(vec![shape[0], shape[1], shape[2] * shape[3] * shape[4]])
            .expect("filters contiguous");
        let (w, b) = weight_average(&as_members, &self.biases).expect("shapes valid");
        self.filters = w.reshape(shape).expect("shape preserved");
        self.biases = b;
    }

    pub fn member_layer(&self, j: usize) -> ConvPlain<T> {
        let s = self.filters.shape().to_vec();
        let (k, n) = (s[0], s[1]);
        let per = s[2] * s[3] * s[4];
        let mut filters = Tensor::zeros(&[k, s[2], s[3], s[4]]);
        let mut biases = Tensor::zeros(&[k]);
        for i in 0..k {
            let src = (i * n + j) * per;
            filters.data_mut()[i * per..(i + 1) * per]
                .copy_from_slice(&self.filters.data()[src..src + per]);
            biases.data_mut()[i] = self.biases.at2(i, j);
        }
        ConvPlain {
            filters,
            biases,
            stride: self.stride,
            padding: self.padding,
            activation: Some(self.activation),
        }
    }
}

/// An ordinary convolution layer: filters `[o, c, kh, kw]`, biases `[o]`.
#[derive(Debug, Clone)]
pub struct ConvPlain<T> {
    pub filters: Tensor<T>,
    pub biases: Tensor<T>,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone)]
pub struct ConvPlainState<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
}

impl<T: Scalar> ConvPlain<T> {
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
        kind: Option<Activation>,
        rng: &mut impl Rng,
    ) -> Self {
        let (kh, kw) = kernel;
        let fan_in = in_channels * kh * kw;
        let limit = init_limit(fan_in, out_channels);
        let mut filters = Tensor::zeros(&[out_channels, in_channels, kh, kw]);
        for o in 0..out_channels {
            let draw = uniform_tensor::<T>(&[fan_in], limit, rng);
            filters.data_mut()[o * fan_in..(o + 1) * fan_in].copy_from_slice(draw.data());
        }
        Self {
            filters,
            biases: Tensor::zeros(&[out_channels]),
            stride,
            padding,
            activation: kind,
        }
    }

    pub fn param_count(&self) -> usize {
        self.filters.len() + self.biases.len()
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_train(input)?.0)
    }

    pub fn forward_train(&self, input: &Tensor<T>) -> Result<(Tensor<T>, ConvPlainState<T>)> {
        let mut pre = conv2d(input, &self.filters, self.stride, self.padding)?;
        let units = self.filters.dim(0);
        let map = pre.dim(2) * pre.dim(3);
        for b in 0..pre.dim(0) {
            for o in 0..units {
                let bias = self.biases.data()[o];
                let base = (b * units + o) * map;
                for v in &mut pre.data_mut()[base..base + map] {
                    *v += bias;
                }
            }
        }
        let out = match self.activation {
            Some(kind) => activation(kind, &pre),
            None => pre.clone(),
        };
        Ok((
            out,
            ConvPlainState {
                input: input.clone(),
                pre,
            },
        ))
    }

    pub fn backward_train(
        &self,
        state: &ConvPlainState<T>,
        upstream: &Tensor<T>,
    ) -> Result<(ParamGrads<T>, Tensor<T>)> {
        let dpre = match self.activation {
            Some(kind) => activation_vjp(kind, &state.pre, upstream)?,
            None => upstream.clone(),
        };
        let units = self.filters.dim(0);
        let map = dpre.dim(2) * dpre.dim(3);
        let mut dbiases = Tensor::zeros(&[units]);
        for b in 0..dpre.dim(0) {
            for o in 0..units {
                let base = (b * units + o) * map;
                let mut acc = T::zero();
                for e in 0..map {
                    acc += dpre.data()[base + e];
                }
                dbiases.data_mut()[o] += acc;
            }
        }
        let (dinput, dweights) =
            conv2d_vjp(&state.input, &self.filters, self.stride, self.padding, &dpre)?;
        Ok((ParamGrads { dweights, dbiases }, dinput))
    }
}
