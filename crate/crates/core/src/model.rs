//! A model is an ordered chain of layers. Hidden layers may be grouped
//! (training form); `combine` produces the deployment form with one node per
//! group and 1/n of the grouped parameters.

use rand::Rng;

use crate::bagging::{exact_expected_output, sample_mask, GroupSpec, MaskBatch};
use crate::error::{Error, Result};
use crate::layers::{
    ConvGrouped, ConvGroupedState, ConvPlain, ConvPlainState, DenseGrouped, DenseGroupedState,
    DensePlain, DensePlainState, ParamGrads,
};
use crate::ops::{global_avg_pool, global_avg_pool_vjp, maxpool2d_forward, maxpool2d_vjp, PoolIndices};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum Layer<T> {
    DenseGrouped(DenseGrouped<T>),
    DensePlain(DensePlain<T>),
    ConvGrouped(ConvGrouped<T>),
    ConvPlain(ConvPlain<T>),
    MaxPool { window: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
}

impl<T: Scalar> Layer<T> {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::DenseGrouped(l) => l.param_count(),
            Layer::DensePlain(l) => l.param_count(),
            Layer::ConvGrouped(l) => l.param_count(),
            Layer::ConvPlain(l) => l.param_count(),
            _ => 0,
        }
    }

    pub fn group_spec(&self) -> Option<&GroupSpec> {
        match self {
            Layer::DenseGrouped(l) => Some(&l.spec),
            Layer::ConvGrouped(l) => Some(&l.spec),
            _ => None,
        }
    }
}

/// Recorded forward state of one layer, consumed by the backward pass.
#[derive(Debug, Clone)]
pub enum LayerState<T> {
    DenseGrouped(DenseGroupedState<T>),
    DensePlain(DensePlainState<T>),
    ConvGrouped(ConvGroupedState<T>),
    ConvPlain(ConvPlainState<T>),
    MaxPool(PoolIndices),
    GlobalAvgPool { input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
}

/// Per-layer gradients, aligned with `Model::layers`.
#[derive(Debug, Clone)]
pub enum LayerGrads<T> {
    Params(ParamGrads<T>),
    None,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn has_grouped_layers(&self) -> bool {
        self.layers.iter().any(|l| l.group_spec().is_some())
    }

    /// Samples one mask batch per grouped layer (in layer order); plain
    /// layers get `None`.
    pub fn sample_masks(&self, batch: usize, rng: &mut impl Rng) -> Vec<Option<MaskBatch<T>>> {
        self.layers
            .iter()
            .map(|layer| layer.group_spec().map(|spec| sample_mask(spec, batch, rng)))
            .collect()
    }

    /// Training-form forward pass. `masks` must align with the layer list.
    pub fn forward_train(
        &self,
        input: &Tensor<T>,
        masks: &[Option<MaskBatch<T>>],
    ) -> Result<(Tensor<T>, Vec<LayerState<T>>)> {
        if masks.len() != self.layers.len() {
            return Err(Error::InvalidArg {
                op: "forward_train",
                msg: format!(
                    "expected {} mask slots, got {}",
                    self.layers.len(),
                    masks.len()
                ),
            });
        }
        let mut states = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for (layer, mask) in self.layers.iter().zip(masks) {
            current = match (layer, mask) {
                (Layer::DenseGrouped(l), Some(m)) => {
                    let (out, st) = l.forward_train(&current, m)?;
                    states.push(LayerState::DenseGrouped(st));
                    out
                }
                (Layer::ConvGrouped(l), Some(m)) => {
                    let (out, st) = l.forward_train(&current, m)?;
                    states.push(LayerState::ConvGrouped(st));
                    out
                }
                (Layer::DensePlain(l), None) => {
                    let (out, st) = l.forward_train(&current)?;
                    states.push(LayerState::DensePlain(st));
                    out
                }
                (Layer::ConvPlain(l), None) => {
                    let (out, st) = l.forward_train(&current)?;
                    states.push(LayerState::ConvPlain(st));
                    out
                }
                (Layer::MaxPool { window, stride }, None) => {
                    let (out, idx) = maxpool2d_forward(&current, *window, *stride)?;
                    states.push(LayerState::MaxPool(idx));
                    out
                }
                (Layer::GlobalAvgPool, None) => {
                    states.push(LayerState::GlobalAvgPool {
                        input_shape: current.shape().to_vec(),
                    });
                    global_avg_pool(&current)?
                }
                (Layer::Flatten, None) => {
                    let shape = current.shape().to_vec();
                    states.push(LayerState::Flatten {
                        input_shape: shape.clone(),
                    });
                    let rest: usize = shape[1..].iter().product();
                    current.reshape(vec![shape[0], rest])?
                }
                (grouped, None) if grouped.group_spec().is_some() => {
                    return Err(Error::InvalidArg {
                        op: "forward_train",
                        msg: "grouped layer is missing its mask".into(),
                    })
                }
                _ => {
                    return Err(Error::InvalidArg {
                        op: "forward_train",
                        msg: "mask supplied for a layer without groups".into(),
                    })
                }
            };
        }
        Ok((current, states))
    }

    /// Backward pass over a recorded forward. Returns gradients aligned with
    /// the layer list.
    pub fn backward_train(
        &self,
        states: &[LayerState<T>],
        upstream: &Tensor<T>,
    ) -> Result<Vec<LayerGrads<T>>> {
        if states.len() != self.layers.len() {
            return Err(Error::InvalidArg {
                op: "backward_train",
                msg: format!(
                    "expected {} recorded layer states, got {}",
                    self.layers.len(),
                    states.len()
                ),
            });
        }
        let mut grads = vec![LayerGrads::None; self.layers.len()];
        let mut current = upstream.clone();
        for idx in (0..self.layers.len()).rev() {
            current = match (&self.layers[idx], &states[idx]) {
                (Layer::DenseGrouped(l), LayerState::DenseGrouped(st)) => {
                    let (g, dx) = l.backward_train(st, &current)?;
                    grads[idx] = LayerGrads::Params(g);
                    dx
                }
                (Layer::ConvGrouped(l), LayerState::ConvGrouped(st)) => {
                    let (g, dx) = l.backward_train(st, &current)?;
                    grads[idx] = LayerGrads::Params(g);
                    dx
                }
                (Layer::DensePlain(l), LayerState::DensePlain(st)) => {
                    let (g, dx) = l.backward_train(st, &current)?;
                    grads[idx] = LayerGrads::Params(g);
                    dx
                }
                (Layer::ConvPlain(l), LayerState::ConvPlain(st)) => {
                    let (g, dx) = l.backward_train(st, &current)?;
                    grads[idx] = LayerGrads::Params(g);
                    dx
                }
                (Layer::MaxPool { .. }, LayerState::MaxPool(indices)) => {
                    maxpool2d_vjp(indices, &current)?
                }
                (Layer::GlobalAvgPool, LayerState::GlobalAvgPool { input_shape }) => {
                    global_avg_pool_vjp(input_shape, &current)?
                }
                (Layer::Flatten, LayerState::Flatten { input_shape }) => {
                    current.reshape(input_shape.clone())?
                }
                _ => {
                    return Err(Error::InvalidArg {
                        op: "backward_train",
                        msg: format!("layer {idx}: recorded state does not match layer kind"),
                    })
                }
            };
        }
        Ok(grads)
    }

    /// Inference forward for fully plain models (e.g. after `combine`).
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut current = input.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            current = match layer {
                Layer::DensePlain(l) => l.forward(&current)?,
                Layer::ConvPlain(l) => l.forward(&current)?,
                Layer::MaxPool { window, stride } => {
                    maxpool2d_forward(&current, *window, *stride)?.0
                }
                Layer::GlobalAvgPool => global_avg_pool(&current)?,
                Layer::Flatten => {
                    let shape = current.shape().to_vec();
                    let rest: usize = shape[1..].iter().product();
                    current.reshape(vec![shape[0], rest])?
                }
                Layer::DenseGrouped(_) | Layer::ConvGrouped(_) => {
                    return Err(Error::InvalidArg {
                        op: "forward",
                        msg: format!(
                            "layer {idx} is grouped; combine() the model or use forward_train"
                        ),
                    })
                }
            };
        }
        Ok(current)
    }

    /// Forward pass where each grouped layer outputs the *exact* expectation
    /// of its sampled output over the full mask distribution (enumeration per
    /// group). The fidelity oracle behind the `expected` evaluation mode.
    pub fn forward_expected(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut current = input.clone();
        for layer in &self.layers {
            current = match layer {
                Layer::DenseGrouped(l) => {
                    let pre = l.member_pre_activations(&current)?;
                    expected_over_masks(&pre, &l.spec, l.activation, &[])?
                }
                Layer::ConvGrouped(l) => {
                    let pre = l.member_pre_activations(&current)?;
                    let (batch, oh, ow) = (pre.dim(0), pre.dim(2), pre.dim(3));
                    let grouped = pre.reshape(vec![
                        batch,
                        l.spec.group_count(),
                        l.spec.group_size(),
                        oh,
                        ow,
                    ])?;
                    expected_over_masks(&grouped, &l.spec, l.activation, &[oh, ow])?
                }
                Layer::DensePlain(l) => l.forward(&current)?,
                Layer::ConvPlain(l) => l.forward(&current)?,
                Layer::MaxPool { window, stride } => {
                    maxpool2d_forward(&current, *window, *stride)?.0
                }
                Layer::GlobalAvgPool => global_avg_pool(&current)?,
                Layer::Flatten => {
                    let shape = current.shape().to_vec();
                    let rest: usize = shape[1..].iter().product();
                    current.reshape(vec![shape[0], rest])?
                }
            };
        }
        Ok(current)
    }

    /// Deployment form: every grouped layer collapsed to one node per group.
    pub fn combine(&self) -> Model<T> {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::DenseGrouped(l) => Layer::DensePlain(l.combine()),
                Layer::ConvGrouped(l) => Layer::ConvPlain(l.combine()),
                other => other.clone(),
            })
            .collect();
        Model::new(layers)
    }

    /// Diagnostic form using only member 0 of every group.
    pub fn single_member(&self) -> Model<T> {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::DenseGrouped(l) => Layer::DensePlain(l.member_layer(0)),
                Layer::ConvGrouped(l) => Layer::ConvPlain(l.member_layer(0)),
                other => other.clone(),
            })
            .collect();
        Model::new(layers)
    }

    /// Resets every group's members to their mean parameters (weights and
    /// biases), in place.
    pub fn weight_average(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::DenseGrouped(l) => l.average_members(),
                Layer::ConvGrouped(l) => l.average_members(),
                _ => {}
            }
        }
    }

    /// Parameter tensors in a fixed order: layers ascending, weights before
    /// biases. Optimizer state aligns with this order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::DenseGrouped(l) => {
                    out.push(&l.weights);
                    out.push(&l.biases);
                }
                Layer::DensePlain(l) => {
                    out.push(&l.weights);
                    out.push(&l.biases);
                }
                Layer::ConvGrouped(l) => {
                    out.push(&l.filters);
                    out.push(&l.biases);
                }
                Layer::ConvPlain(l) => {
                    out.push(&l.filters);
                    out.push(&l.biases);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::DenseGrouped(l) => {
                    out.push(&mut l.weights);
                    out.push(&mut l.biases);
                }
                Layer::DensePlain(l) => {
                    out.push(&mut l.weights);
                    out.push(&mut l.biases);
                }
                Layer::ConvGrouped(l) => {
                    out.push(&mut l.filters);
                    out.push(&mut l.biases);
                }
                Layer::ConvPlain(l) => {
                    out.push(&mut l.filters);
                    out.push(&mut l.biases);
                }
                _ => {}
            }
        }
        out
    }

    /// `(layer index, tensor name)` per parameter slot, for error reporting.
    pub fn param_labels(&self) -> Vec<(usize, &'static str)> {
        let mut out = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::DenseGrouped(_) | Layer::DensePlain(_) => {
                    out.push((idx, "weights"));
                    out.push((idx, "biases"));
                }
                Layer::ConvGrouped(_) | Layer::ConvPlain(_) => {
                    out.push((idx, "filters"));
                    out.push((idx, "biases"));
                }
                _ => {}
            }
        }
        out
    }

    /// Group size per parameter slot (`None` for ungrouped parameters);
    /// drives optimizer-state averaging.
    pub fn param_grouping(&self) -> Vec<Option<usize>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::DenseGrouped(l) => {
                    out.push(Some(l.spec.group_size()));
                    out.push(Some(l.spec.group_size()));
                }
                Layer::ConvGrouped(l) => {
                    out.push(Some(l.spec.group_size()));
                    out.push(Some(l.spec.group_size()));
                }
                Layer::DensePlain(_) | Layer::ConvPlain(_) => {
                    out.push(None);
                    out.push(None);
                }
                _ => {}
            }
        }
        out
    }

    /// Gradient tensors aligned with [`Model::params`].
    pub fn grad_tensors<'a>(&self, grads: &'a [LayerGrads<T>]) -> Result<Vec<&'a Tensor<T>>> {
        if grads.len() != self.layers.len() {
            return Err(Error::InvalidArg {
                op: "grad_tensors",
                msg: "gradient list does not align with layer list".into(),
            });
        }
        let mut out = Vec::new();
        for (layer, grad) in self.layers.iter().zip(grads) {
            match (layer.param_count() > 0, grad) {
                (true, LayerGrads::Params(g)) => {
                    out.push(&g.dweights);
                    out.push(&g.dbiases);
                }
                (false, LayerGrads::None) => {}
                _ => {
                    return Err(Error::InvalidArg {
                        op: "grad_tensors",
                        msg: "gradient kind does not match layer kind".into(),
                    })
                }
            }
        }
        Ok(out)
    }
}

/// Exact expectation of the masked group reduction for `[batch, k, n, ...]`
/// member pre-activations, elementwise over any trailing dimensions.
fn expected_over_masks<T: Scalar>(
    pre: &Tensor<T>,
    spec: &GroupSpec,
    kind: crate::ops::Activation,
    trailing: &[usize],
) -> Result<Tensor<T>> {
    let (batch, k, n) = (pre.dim(0), pre.dim(1), pre.dim(2));
    let rest: usize = trailing.iter().product::<usize>().max(1);
    let mut out_shape = vec![batch, k];
    out_shape.extend_from_slice(trailing);
    let mut out = Tensor::zeros(&out_shape);
    let pd = pre.data();
    let mut member = Tensor::zeros(&[k, n]);
    for b in 0..batch {
        for e in 0..rest {
            for i in 0..k {
                for j in 0..n {
                    member.data_mut()[i * n + j] = pd[((b * k + i) * n + j) * rest + e];
                }
            }
            let expected = exact_expected_output(&member, spec, kind)?;
            for i in 0..k {
                out.data_mut()[(b * k + i) * rest + e] = expected.data()[i];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagging::SampleMethod;
    use crate::ops::Activation;
    use crate::rng::{stream_rng, uniform_tensor, STREAM_INIT, STREAM_MASKS};

    fn tiny_model(method: SampleMethod, n: usize) -> Model<f64> {
        let spec = GroupSpec::new(3, n, method, 0.5).unwrap();
        let mut rng = stream_rng(2, STREAM_INIT);
        Model::new(vec![
            Layer::Flatten,
            Layer::DenseGrouped(DenseGrouped::init(4, spec, Activation::Relu, &mut rng)),
            Layer::DensePlain(DensePlain::init(3, 2, None, &mut rng)),
        ])
    }

    #[test]
    fn combine_divides_grouped_params_exactly_by_n() {
        let model = tiny_model(SampleMethod::A, 4);
        let combined = model.combine();
        let grouped_params = 3 * 4 * 4 + 3 * 4;
        let head = 2 * 3 + 2;
        assert_eq!(model.param_count(), grouped_params + head);
        assert_eq!(combined.param_count(), grouped_params / 4 + head);
        assert!(!combined.has_grouped_layers());
    }

    #[test]
    fn forward_rejects_grouped_layers() {
        let model = tiny_model(SampleMethod::A, 2);
        let x = Tensor::zeros(&[1, 4]);
        assert!(model.forward(&x).is_err());
        assert!(model.combine().forward(&x).is_ok());
    }

    #[test]
    fn forward_expected_equals_combined_on_positive_preactivations() {
        // Shift biases so every member pre-activation is positive; on relu's
        // linear region the combined model equals the exact expectation.
        let mut model = tiny_model(SampleMethod::A, 3);
        if let Layer::DenseGrouped(l) = &mut model.layers[1] {
            for v in l.biases.data_mut() {
                *v = 5.0;
            }
        }
        let x = uniform_tensor::<f64>(&[4, 4], 0.5, &mut stream_rng(5, 9))
            .reshape(vec![4, 1, 2, 2])
            .unwrap();
        let expected = model.forward_expected(&x).unwrap();
        let combined = model.combine().forward(&x).unwrap();
        for (a, b) in expected.data().iter().zip(combined.data()) {
            let rel = (a - b).abs() / b.abs().max(1e-9);
            assert!(rel < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn single_member_equals_combined_for_b_n1() {
        let model = tiny_model(SampleMethod::B, 1);
        let x = uniform_tensor::<f64>(&[5, 4], 1.0, &mut stream_rng(7, 9))
            .reshape(vec![5, 1, 2, 2])
            .unwrap();
        let a = model.combine().forward(&x).unwrap();
        let b = model.single_member().forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn masks_align_with_grouped_layers_only() {
        let model = tiny_model(SampleMethod::B, 2);
        let masks = model.sample_masks(6, &mut stream_rng(3, STREAM_MASKS));
        assert_eq!(masks.len(), 3);
        assert!(masks[0].is_none());
        assert!(masks[1].is_some());
        assert!(masks[2].is_none());
    }

    #[test]
    fn combined_accuracy_invariant_to_combination_order() {
        // Combining is per-layer; combining twice (idempotent on plain) and
        // in any order gives the same network.
        let model = tiny_model(SampleMethod::A, 2);
        let x = uniform_tensor::<f64>(&[3, 4], 1.0, &mut stream_rng(11, 9))
            .reshape(vec![3, 1, 2, 2])
            .unwrap();
        let once = model.combine().forward(&x).unwrap();

        // Combine layer 1 first into a copy, then the rest.
        let mut partial = model.clone();
        if let Layer::DenseGrouped(l) = &partial.layers[1] {
            partial.layers[1] = Layer::DensePlain(l.combine());
        }
        let twice = partial.combine().forward(&x).unwrap();
        assert_eq!(once.data(), twice.data());
    }
}
