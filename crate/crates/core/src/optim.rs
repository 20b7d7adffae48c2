//! Adam optimizer with bias correction, learning-rate schedules, and the
//! grouped-moment averaging that accompanies weight averaging.

use crate::bagging::group_member_mean;
use crate::error::{Error, Result};
use crate::model::{LayerGrads, Model};
use crate::scalar::{fl, Scalar};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First/second moment accumulators for every parameter tensor of a model,
/// aligned with `Model::params`, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &Model<T>) -> Self {
        let shapes: Vec<Vec<usize>> = model
            .params()
            .iter()
            .map(|p| p.shape().to_vec())
            .collect();
        Self {
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over every parameter of the model.
    /// A non-finite gradient aborts with the offending parameter named.
    pub fn step(
        &mut self,
        model: &mut Model<T>,
        grads: &[LayerGrads<T>],
        lr: T,
    ) -> Result<()> {
        if lr <= T::zero() {
            return Err(Error::InvalidArg {
                op: "adam_step",
                msg: format!("learning rate must be positive, got {lr}"),
            });
        }
        let grad_tensors: Vec<&Tensor<T>> = model.grad_tensors(grads)?;
        let labels = model.param_labels();
        let params = model.params_mut();
        if params.len() != self.first.len() || grad_tensors.len() != self.first.len() {
            return Err(Error::InvalidArg {
                op: "adam_step",
                msg: "optimizer state does not align with model parameters".into(),
            });
        }

        self.step += 1;
        let beta1 = fl::<T>(ADAM_BETA1);
        let beta2 = fl::<T>(ADAM_BETA2);
        let eps = fl::<T>(ADAM_EPSILON);
        let t = self.step as i32;
        let corr1 = T::one() - beta1.powi(t);
        let corr2 = T::one() - beta2.powi(t);

        for (slot, param) in params.into_iter().enumerate() {
            let grad = grad_tensors[slot];
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: grad.shape().to_vec(),
                    rhs: param.shape().to_vec(),
                });
            }
            if !grad.all_finite() {
                let (layer, name) = labels[slot];
                return Err(Error::NonFiniteGradient { layer, param: name });
            }
            let m = self.first[slot].data_mut();
            let v = self.second[slot].data_mut();
            let p = param.data_mut();
            for ((pv, &g), (mv, vv)) in p
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = beta1 * *mv + (T::one() - beta1) * g;
                *vv = beta2 * *vv + (T::one() - beta2) * g * g;
                let m_hat = *mv / corr1;
                let v_hat = *vv / corr2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Averages the moment accumulators within each group, mirroring what
    /// weight averaging does to the parameters. `grouping` comes from
    /// [`Model::param_grouping`]; slots with `None` are left untouched.
    pub fn average_groups(&mut self, grouping: &[Option<usize>]) -> Result<()> {
        if grouping.len() != self.first.len() {
            return Err(Error::InvalidArg {
                op: "average_optimizer_state",
                msg: "grouping layout does not align with optimizer slots".into(),
            });
        }
        for (slot, group) in grouping.iter().enumerate() {
            if group.is_some() {
                self.first[slot] = group_member_mean(&self.first[slot]);
                self.second[slot] = group_member_mean(&self.second[slot]);
            }
        }
        Ok(())
    }

    pub fn moments(&self, slot: usize) -> (&Tensor<T>, &Tensor<T>) {
        (&self.first[slot], &self.second[slot])
    }
}

/// Averages optimizer moments within each group. Companion to weight
/// averaging: after members are reset to their mean, divergent per-member
/// momentum would immediately re-split them.
pub fn average_optimizer_state<T: Scalar>(
    state: &mut AdamState<T>,
    grouping: &[Option<usize>],
) -> Result<()> {
    state.average_groups(grouping)
}

/// Learning-rate schedule: fixed epoch segments, or decay on a validation
/// plateau.
#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    /// Ordered `(epoch span, rate)` segments, contiguous from epoch 0.
    /// Epochs past the last segment keep its rate.
    Piecewise(Vec<(usize, f64)>),
    /// Multiply the rate by `factor` whenever validation error has not
    /// improved for `patience` consecutive epochs, never below `min_rate`.
    Plateau {
        initial: f64,
        factor: f64,
        patience: usize,
        min_rate: f64,
    },
}

impl LrSchedule {
    /// 100 epochs at 1e-3 followed by 100 epochs at 1e-4.
    pub fn mnist_two_stage() -> Self {
        LrSchedule::Piecewise(vec![(100, 1e-3), (100, 1e-4)])
    }

    pub fn constant(rate: f64) -> Self {
        LrSchedule::Piecewise(vec![(usize::MAX, rate)])
    }

    /// Plateau decay with the default factor 0.1, patience 5, floor 1e-5.
    pub fn plateau_default(initial: f64) -> Self {
        LrSchedule::Plateau {
            initial,
            factor: 0.1,
            patience: 5,
            min_rate: 1e-5,
        }
    }

    /// Rate for `epoch`, given the validation-error history of all epochs
    /// before it. Pure: same inputs, same output.
    pub fn lr_at(&self, epoch: usize, val_history: &[f64]) -> f64 {
        match self {
            LrSchedule::Piecewise(segments) => {
                let mut boundary = 0usize;
                for &(span, rate) in segments {
                    boundary = boundary.saturating_add(span);
                    if epoch < boundary {
                        return rate;
                    }
                }
                segments.last().map(|&(_, rate)| rate).unwrap_or(0.0)
            }
            LrSchedule::Plateau {
                initial,
                factor,
                patience,
                min_rate,
            } => {
                let mut rate = *initial;
                if val_history.is_empty() {
                    return rate;
                }
                let mut best = val_history[0];
                let mut stale = 0usize;
                for &err in &val_history[1..] {
                    if err < best {
                        best = err;
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= *patience {
                            rate = (rate * factor).max(*min_rate);
                            stale = 0;
                        }
                    }
                }
                rate
            }
        }
    }
}
