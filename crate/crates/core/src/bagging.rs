//! Internal node bagging primitives: group configuration, mask sampling
//! (methods A and B), the masked group reduction used in training, periodic
//! weight averaging, and the analytic combination that collapses each group
//! to a single node for inference.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{activate, Activation};
use crate::scalar::{fl, Scalar};
use crate::tensor::Tensor;

/// Largest group size the exact mask enumeration accepts.
pub const MAX_ENUMERATION_GROUP_SIZE: usize = 20;

/// How member masks are drawn within a group.
///
/// Method A keeps every member independently with probability `p`
/// (group size 1 recovers dropout). Method B keeps exactly one uniformly
/// chosen member per group (group size 1 recovers a standard network).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMethod {
    A,
    B,
}

impl fmt::Display for SampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleMethod::A => write!(f, "A"),
            SampleMethod::B => write!(f, "B"),
        }
    }
}

impl FromStr for SampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(SampleMethod::A),
            "B" => Ok(SampleMethod::B),
            other => Err(Error::InvalidArg {
                op: "method",
                msg: format!("unknown sampling method {other:?} (expected A|B)"),
            }),
        }
    }
}

/// Configuration of one bagged layer: `group_count` groups of `group_size`
/// members each. `keep_prob` only matters for method A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSpec {
    group_count: usize,
    group_size: usize,
    method: SampleMethod,
    keep_prob: f64,
}

impl GroupSpec {
    pub fn new(
        group_count: usize,
        group_size: usize,
        method: SampleMethod,
        keep_prob: f64,
    ) -> Result<Self> {
        if group_count == 0 || group_size == 0 {
            return Err(Error::InvalidArg {
                op: "group_spec",
                msg: format!("group_count ({group_count}) and group_size ({group_size}) must be at least 1"),
            });
        }
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::InvalidArg {
                op: "group_spec",
                msg: format!("keep_prob must lie in (0, 1], got {keep_prob}"),
            });
        }
        Ok(Self {
            group_count,
            group_size,
            method,
            keep_prob,
        })
    }

    #[inline]
    pub fn group_count(&self) -> usize {
        self.group_count
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    #[inline]
    pub fn method(&self) -> SampleMethod {
        self.method
    }

    #[inline]
    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }
}

/// One realization of the member masks for a batch: a binary `[batch, k, n]`
/// tensor. Under method B every `(sample, group)` slice is exactly one-hot.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch<T> {
    values: Tensor<T>,
}

impl<T: Scalar> MaskBatch<T> {
    pub fn from_tensor(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::ShapeMismatch {
                op: "mask_batch",
                lhs: values.shape().to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        if !values
            .data()
            .iter()
            .all(|&v| v == T::zero() || v == T::one())
        {
            return Err(Error::InvalidArg {
                op: "mask_batch",
                msg: "mask entries must be exactly 0 or 1".into(),
            });
        }
        Ok(Self { values })
    }

    pub fn all_ones(batch: usize, group_count: usize, group_size: usize) -> Self {
        Self {
            values: Tensor::filled(&[batch, group_count, group_size], T::one()),
        }
    }

    #[inline]
    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.values.dim(0)
    }

    #[inline]
    pub fn group_count(&self) -> usize {
        self.values.dim(1)
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.values.dim(2)
    }
}

/// Marginal probability that one member's mask is 1: `p` for method A,
/// `1/n` for method B.
pub fn expected_keep(spec: &GroupSpec) -> f64 {
    match spec.method {
        SampleMethod::A => spec.keep_prob,
        SampleMethod::B => 1.0 / spec.group_size as f64,
    }
}

/// Draws one mask per sample for every group member.
///
/// Method A draws independent Bernoulli(`keep_prob`) entries in row-major
/// `(sample, group, member)` order; method B draws one uniform member index
/// per `(sample, group)` pair. The degenerate cases that admit only one mask
/// (method A with p = 1, method B with n = 1) consume no RNG draws.
pub fn sample_mask<T: Scalar>(
    spec: &GroupSpec,
    batch: usize,
    rng: &mut impl Rng,
) -> MaskBatch<T> {
    let (k, n) = (spec.group_count, spec.group_size);
    match spec.method {
        SampleMethod::A => {
            if spec.keep_prob == 1.0 {
                return MaskBatch::all_ones(batch, k, n);
            }
            let data = (0..batch * k * n)
                .map(|_| {
                    if rng.gen::<f64>() < spec.keep_prob {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect();
            MaskBatch {
                values: Tensor::from_vec(vec![batch, k, n], data).expect("shape matches"),
            }
        }
        SampleMethod::B => {
            if n == 1 {
                return MaskBatch::all_ones(batch, k, n);
            }
            let mut data = vec![T::zero(); batch * k * n];
            for slot in 0..batch * k {
                let pick = rng.gen_range(0..n);
                data[slot * n + pick] = T::one();
            }
            MaskBatch {
                values: Tensor::from_vec(vec![batch, k, n], data).expect("shape matches"),
            }
        }
    }
}

/// Masked sum over the member axis: `out[b, i, ..] = sum_j mask[b, i, j] * y[b, i, j, ..]`.
///
/// Accepts `[batch, k, n]` member outputs (dense layers) or `[batch, k, n, ...]`
/// (conv layers, where one mask entry gates a member's whole feature map).
pub fn group_reduce<T: Scalar>(
    member_outputs: &Tensor<T>,
    mask: &MaskBatch<T>,
) -> Result<Tensor<T>> {
    let shape = member_outputs.shape();
    if shape.len() < 3
        || shape[0] != mask.batch()
        || shape[1] != mask.group_count()
        || shape[2] != mask.group_size()
    {
        return Err(Error::ShapeMismatch {
            op: "group_reduce",
            lhs: shape.to_vec(),
            rhs: mask.values.shape().to_vec(),
        });
    }
    let (batch, k, n) = (shape[0], shape[1], shape[2]);
    let rest: usize = shape[3..].iter().product();
    let mut out_shape = vec![batch, k];
    out_shape.extend_from_slice(&shape[3..]);

    let mut out = vec![T::zero(); batch * k * rest];
    let yd = member_outputs.data();
    let md = mask.values.data();
    for bi in 0..batch * k {
        let out_row = &mut out[bi * rest..(bi + 1) * rest];
        for j in 0..n {
            let m = md[bi * n + j];
            if m == T::zero() {
                continue;
            }
            let member = &yd[(bi * n + j) * rest..(bi * n + j + 1) * rest];
            for (o, &y) in out_row.iter_mut().zip(member) {
                *o += m * y;
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Group mean along the member axis (axis 1 of `[k, n, ...]`), in delta form
/// `w[0] + sum_j (w[j] - w[0]) / n` so the mean of bit-identical members is
/// bit-exactly that member. Output keeps the input shape with every member
/// replaced by its group mean.
pub fn group_member_mean<T: Scalar>(tensor: &Tensor<T>) -> Tensor<T> {
    let shape = tensor.shape();
    debug_assert!(shape.len() >= 2);
    let (k, n) = (shape[0], shape[1]);
    let rest: usize = shape[2..].iter().product();
    let inv_n = T::one() / fl::<T>(n as f64);

    let mut out = vec![T::zero(); tensor.len()];
    let td = tensor.data();
    for i in 0..k {
        let base = i * n * rest;
        for e in 0..rest {
            let first = td[base + e];
            let mut acc = T::zero();
            for j in 1..n {
                acc += td[base + j * rest + e] - first;
            }
            let mean = first + acc * inv_n;
            for j in 0..n {
                out[base + j * rest + e] = mean;
            }
        }
    }
    Tensor::from_vec(shape.to_vec(), out).expect("shape preserved")
}

/// Replaces every member's weights and bias with its group mean; shapes are
/// preserved and the operation is idempotent.
pub fn weight_average<T: Scalar>(
    member_weights: &Tensor<T>,
    member_biases: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_member_shapes("weight_average", member_weights, member_biases)?;
    Ok((
        group_member_mean(member_weights),
        group_member_mean(member_biases),
    ))
}

/// Sums a `[k, n, ...]` tensor over its member axis and scales by `factor`,
/// producing `[k, ...]`.
fn combine_members<T: Scalar>(tensor: &Tensor<T>, factor: T) -> Tensor<T> {
    let shape = tensor.shape();
    let (k, n) = (shape[0], shape[1]);
    let rest: usize = shape[2..].iter().product();
    let mut out_shape = vec![k];
    out_shape.extend_from_slice(&shape[2..]);

    let mut out = vec![T::zero(); k * rest];
    let td = tensor.data();
    for i in 0..k {
        for e in 0..rest {
            let mut acc = T::zero();
            for j in 0..n {
                acc += td[(i * n + j) * rest + e];
            }
            out[i * rest + e] = acc * factor;
        }
    }
    Tensor::from_vec(out_shape, out).expect("shape consistent")
}

/// Collapses each group to one node: combined weight `E(m) * sum_j w_j` and
/// combined bias `E(m) * sum_j b_j`.
///
/// For method B, `E(m) = 1/n`, so the combined node is the member mean and is
/// computed as such (delta form, bit-exact for identical members). Method A
/// uses the literal scaled sum; with n = 1 this is classic weight scaling.
pub fn combine_group<T: Scalar>(
    member_weights: &Tensor<T>,
    member_biases: &Tensor<T>,
    spec: &GroupSpec,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_member_shapes("combine_group", member_weights, member_biases)?;
    if member_weights.dim(0) != spec.group_count() || member_weights.dim(1) != spec.group_size() {
        return Err(Error::ShapeMismatch {
            op: "combine_group",
            lhs: member_weights.shape().to_vec(),
            rhs: vec![spec.group_count(), spec.group_size()],
        });
    }
    match spec.method() {
        SampleMethod::B => Ok((
            take_first_member(&group_member_mean(member_weights)),
            take_first_member(&group_member_mean(member_biases)),
        )),
        SampleMethod::A => {
            let scale = fl::<T>(spec.keep_prob());
            Ok((
                combine_members(member_weights, scale),
                combine_members(member_biases, scale),
            ))
        }
    }
}

fn take_first_member<T: Scalar>(tensor: &Tensor<T>) -> Tensor<T> {
    let shape = tensor.shape();
    let (k, n) = (shape[0], shape[1]);
    let rest: usize = shape[2..].iter().product();
    let mut out_shape = vec![k];
    out_shape.extend_from_slice(&shape[2..]);
    let mut out = vec![T::zero(); k * rest];
    for i in 0..k {
        out[i * rest..(i + 1) * rest]
            .copy_from_slice(&tensor.data()[i * n * rest..i * n * rest + rest]);
    }
    Tensor::from_vec(out_shape, out).expect("shape consistent")
}

fn check_member_shapes<T: Scalar>(
    op: &'static str,
    weights: &Tensor<T>,
    biases: &Tensor<T>,
) -> Result<()> {
    if weights.rank() < 2
        || biases.rank() != 2
        || weights.dim(0) != biases.dim(0)
        || weights.dim(1) != biases.dim(1)
    {
        return Err(Error::ShapeMismatch {
            op,
            lhs: weights.shape().to_vec(),
            rhs: biases.shape().to_vec(),
        });
    }
    Ok(())
}

/// Exact expectation of the sampled group output `sum_j m_j * f(pre_j)` over
/// the full mask distribution, by enumeration.
///
/// This is the reference oracle the combination fidelity checks compare
/// against; it never takes the closed-form shortcut. `pre` is `[k, n]`, the
/// result is `[k]`. Method A enumerates all `2^n` masks per group, method B
/// its `n` one-hot masks, so `n` is capped at [`MAX_ENUMERATION_GROUP_SIZE`].
pub fn exact_expected_output<T: Scalar>(
    pre: &Tensor<T>,
    spec: &GroupSpec,
    kind: Activation,
) -> Result<Tensor<T>> {
    if pre.rank() != 2 || pre.dim(0) != spec.group_count() || pre.dim(1) != spec.group_size() {
        return Err(Error::ShapeMismatch {
            op: "exact_expected_output",
            lhs: pre.shape().to_vec(),
            rhs: vec![spec.group_count(), spec.group_size()],
        });
    }
    let n = spec.group_size();
    if n > MAX_ENUMERATION_GROUP_SIZE {
        return Err(Error::EnumerationTooLarge {
            group_size: n,
            max: MAX_ENUMERATION_GROUP_SIZE,
        });
    }
    let k = spec.group_count();
    let mut out = vec![T::zero(); k];
    for (i, slot) in out.iter_mut().enumerate() {
        let activated: Vec<T> = (0..n).map(|j| activate(kind, pre.at2(i, j))).collect();
        *slot = match spec.method() {
            SampleMethod::A => {
                let p = fl::<T>(spec.keep_prob());
                let q = T::one() - p;
                let mut acc = T::zero();
                for mask_bits in 0u64..(1u64 << n) {
                    let mut prob = T::one();
                    let mut masked_sum = T::zero();
                    for (j, &y) in activated.iter().enumerate() {
                        if mask_bits >> j & 1 == 1 {
                            prob *= p;
                            masked_sum += y;
                        } else {
                            prob *= q;
                        }
                    }
                    acc += prob * masked_sum;
                }
                acc
            }
            SampleMethod::B => {
                let inv_n = T::one() / fl::<T>(n as f64);
                let mut acc = T::zero();
                for &y in &activated {
                    acc += inv_n * y;
                }
                acc
            }
        };
    }
    Tensor::from_vec(vec![k], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, uniform_tensor};

    fn spec(method: SampleMethod, k: usize, n: usize, p: f64) -> GroupSpec {
        GroupSpec::new(k, n, method, p).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(GroupSpec::new(0, 2, SampleMethod::A, 0.5).is_err());
        assert!(GroupSpec::new(2, 0, SampleMethod::A, 0.5).is_err());
        assert!(GroupSpec::new(2, 2, SampleMethod::A, 0.0).is_err());
        assert!(GroupSpec::new(2, 2, SampleMethod::A, 1.1).is_err());
        assert!(GroupSpec::new(2, 2, SampleMethod::A, 1.0).is_ok());
    }

    #[test]
    fn expected_keep_values() {
        assert_eq!(expected_keep(&spec(SampleMethod::A, 3, 2, 0.5)), 0.5);
        assert_eq!(expected_keep(&spec(SampleMethod::B, 3, 1, 0.5)), 1.0);
        // Oracle for (B, n=4): enumerate the 4 one-hot masks; each member is
        // kept in exactly 1 of 4 equally likely masks.
        let mut kept = [0usize; 4];
        for onehot in 0..4 {
            for (member, count) in kept.iter_mut().enumerate() {
                if member == onehot {
                    *count += 1;
                }
            }
        }
        assert!(kept.iter().all(|&c| c == 1));
        assert_eq!(expected_keep(&spec(SampleMethod::B, 3, 4, 0.5)), 1.0 / 4.0);
    }

    #[test]
    fn sample_mask_degenerate_cases_are_all_ones_without_draws() {
        let mut rng = stream_rng(5, 1);
        let before = rng.clone();
        let m = sample_mask::<f64>(&spec(SampleMethod::B, 4, 1, 0.5), 8, &mut rng);
        assert!(m.values().data().iter().all(|&v| v == 1.0));
        let m2 = sample_mask::<f64>(&spec(SampleMethod::A, 4, 3, 1.0), 8, &mut rng);
        assert!(m2.values().data().iter().all(|&v| v == 1.0));
        // No RNG consumption for either degenerate case.
        assert_eq!(rng, before);
    }

    #[test]
    fn sample_mask_method_a_empirical_mean() {
        let s = spec(SampleMethod::A, 4, 2, 0.5);
        let mut rng = stream_rng(11, 1);
        let m = sample_mask::<f64>(&s, 100_000, &mut rng);
        let mean: f64 = m.values().data().iter().sum::<f64>() / m.values().len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "empirical mean {mean}");
    }

    #[test]
    fn sample_mask_empirical_mean_within_three_standard_errors() {
        for (s, samples) in [
            (spec(SampleMethod::A, 2, 3, 0.5), 100_000usize),
            (spec(SampleMethod::B, 2, 4, 0.5), 100_000usize),
        ] {
            let e = expected_keep(&s);
            let mut rng = stream_rng(13, 1);
            let m = sample_mask::<f64>(&s, samples, &mut rng);
            let len = m.values().len() as f64;
            let mean: f64 = m.values().data().iter().sum::<f64>() / len;
            let se = (e * (1.0 - e) / len).sqrt();
            assert!(
                (mean - e).abs() <= 3.0 * se,
                "method {:?}: mean {mean} expected {e} se {se}",
                s.method()
            );
        }
    }

    #[test]
    fn method_b_masks_are_one_hot() {
        let s = spec(SampleMethod::B, 3, 5, 0.5);
        let mut rng = stream_rng(17, 1);
        let m = sample_mask::<f64>(&s, 64, &mut rng);
        for b in 0..64 {
            for i in 0..3 {
                let ones: f64 = (0..5).map(|j| m.values().at3(b, i, j)).sum();
                assert_eq!(ones, 1.0);
            }
        }
    }

    #[test]
    fn group_reduce_identity_and_zero() {
        let mut rng = stream_rng(19, 1);
        let y = uniform_tensor::<f64>(&[4, 3, 1], 1.0, &mut rng);
        let ones = MaskBatch::all_ones(4, 3, 1);
        let out = group_reduce(&y, &ones).unwrap();
        assert_eq!(out.shape(), &[4, 3]);
        assert_eq!(out.data(), y.data());

        let zeros = MaskBatch::from_tensor(Tensor::zeros(&[4, 3, 2])).unwrap();
        let y2 = uniform_tensor::<f64>(&[4, 3, 2], 1.0, &mut rng);
        assert!(group_reduce(&y2, &zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn group_reduce_method_b_equals_indexed_selection() {
        let s = spec(SampleMethod::B, 3, 4, 0.5);
        let mut rng = stream_rng(23, 1);
        let y = uniform_tensor::<f64>(&[8, 3, 4], 1.0, &mut rng);
        let m = sample_mask::<f64>(&s, 8, &mut rng);
        let out = group_reduce(&y, &m).unwrap();
        for b in 0..8 {
            for i in 0..3 {
                let j = (0..4).find(|&j| m.values().at3(b, i, j) == 1.0).unwrap();
                assert_eq!(out.at2(b, i), y.at3(b, i, j));
            }
        }
    }

    #[test]
    fn weight_average_examples() {
        let w = Tensor::from_vec(vec![1, 2, 1], vec![2.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 2], vec![2.0, 4.0]).unwrap();
        let (wa, ba) = weight_average(&w, &b).unwrap();
        assert_eq!(wa.data(), &[3.0, 3.0]);
        assert_eq!(ba.data(), &[3.0, 3.0]);
    }

    #[test]
    fn weight_average_is_bit_exact_idempotent() {
        let mut rng = stream_rng(29, 1);
        let w = uniform_tensor::<f32>(&[4, 3, 5], 1.0, &mut rng);
        let b = uniform_tensor::<f32>(&[4, 3], 1.0, &mut rng);
        let (w1, b1) = weight_average(&w, &b).unwrap();
        let (w2, b2) = weight_average(&w1, &b1).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn weight_average_n1_returns_input_unchanged() {
        let mut rng = stream_rng(31, 1);
        let w = uniform_tensor::<f64>(&[4, 1, 5], 1.0, &mut rng);
        let b = uniform_tensor::<f64>(&[4, 1], 1.0, &mut rng);
        let (wa, ba) = weight_average(&w, &b).unwrap();
        assert_eq!(wa, w);
        assert_eq!(ba, b);
    }

    #[test]
    fn weight_average_preserves_group_mean_exactly() {
        let mut rng = stream_rng(37, 1);
        let w = uniform_tensor::<f64>(&[2, 3, 4], 1.0, &mut rng);
        let before = group_member_mean(&w);
        let after = group_member_mean(&group_member_mean(&w));
        assert_eq!(before, after);
    }

    #[test]
    fn combine_group_examples() {
        // Method B, n = 2, member weights {2, 4} -> combined 3.
        let w = Tensor::from_vec(vec![1, 2, 1], vec![2.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let s = spec(SampleMethod::B, 1, 2, 0.5);
        let (cw, cb) = combine_group(&w, &b, &s).unwrap();
        assert_eq!(cw.data(), &[3.0]);
        assert_eq!(cb.data(), &[0.0]);

        // Method A, n = 1, p = 0.5: weight scaling by p.
        let w = Tensor::from_vec(vec![1, 1, 1], vec![6.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap();
        let s = spec(SampleMethod::A, 1, 1, 0.5);
        let (cw, cb) = combine_group(&w, &b, &s).unwrap();
        assert_eq!(cw.data(), &[3.0]);
        assert_eq!(cb.data(), &[1.0]);
    }

    #[test]
    fn combine_group_matches_full_mask_enumeration_on_positive_preactivations() {
        // Method A, n = 3, k = 2: combined relu output vs the exact
        // expectation over all 2^3 masks per group, inputs arranged so all
        // member pre-activations stay positive.
        let s = spec(SampleMethod::A, 2, 3, 0.5);
        let mut rng = stream_rng(41, 1);
        let fan_in = 4;
        let weights_raw = uniform_tensor::<f64>(&[2, 3, fan_in], 1.0, &mut rng);
        let weights = weights_raw.map(|v| v.abs() + 0.05);
        let biases = uniform_tensor::<f64>(&[2, 3], 1.0, &mut rng).map(|v| v.abs());
        let input = uniform_tensor::<f64>(&[fan_in], 1.0, &mut rng).map(|v| v.abs() + 0.05);

        // Member pre-activations (all positive by construction).
        let mut pre = Tensor::zeros(&[2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                let mut acc = biases.at2(i, j);
                for f in 0..fan_in {
                    acc += weights.at3(i, j, f) * input.data()[f];
                }
                assert!(acc > 0.0);
                pre.data_mut()[i * 3 + j] = acc;
            }
        }

        let expected = exact_expected_output(&pre, &s, Activation::Relu).unwrap();

        let (cw, cb) = combine_group(&weights, &biases, &s).unwrap();
        for i in 0..2 {
            let mut acc = cb.data()[i];
            for f in 0..fan_in {
                acc += cw.at2(i, f) * input.data()[f];
            }
            let combined_out = acc.max(0.0);
            let rel = (combined_out - expected.data()[i]).abs() / expected.data()[i].abs();
            assert!(rel < 1e-6, "group {i}: {combined_out} vs {}", expected.data()[i]);
        }
    }

    #[test]
    fn exact_expected_output_examples() {
        // Method B, members all equal v >= 0: every one-hot selects v.
        let pre = Tensor::<f64>::from_vec(vec![1, 3], vec![2.5, 2.5, 2.5]).unwrap();
        let s = spec(SampleMethod::B, 1, 3, 0.5);
        let out = exact_expected_output(&pre, &s, Activation::Relu).unwrap();
        assert!((out.data()[0] - 2.5).abs() < 1e-12);

        // Method A, p = 0.5, n = 1, pre = 4: 0.5 * relu(4) = 2.
        let pre = Tensor::from_vec(vec![1, 1], vec![4.0]).unwrap();
        let s = spec(SampleMethod::A, 1, 1, 0.5);
        let out = exact_expected_output(&pre, &s, Activation::Relu).unwrap();
        assert_eq!(out.data()[0], 2.0);

        // Method A, p = 0.5, n = 2, pre = {1, 3}: (1/4)(0 + 1 + 3 + 4) = 2.
        let pre = Tensor::<f64>::from_vec(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let s = spec(SampleMethod::A, 1, 2, 0.5);
        let out = exact_expected_output(&pre, &s, Activation::Relu).unwrap();
        assert!((out.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn exact_expected_output_rejects_large_groups() {
        let pre = Tensor::<f64>::zeros(&[1, 21]);
        let s = spec(SampleMethod::A, 1, 21, 0.5);
        assert!(matches!(
            exact_expected_output(&pre, &s, Activation::Relu),
            Err(Error::EnumerationTooLarge { group_size: 21, .. })
        ));
    }
}
