//! Property tests for the mask-sampling invariants, the averaging algebra,
//! and the model-file canonical encoding.

use proptest::prelude::*;
use tempfile::tempdir;

use nodebag::bagging::{
    expected_keep, group_member_mean, group_reduce, sample_mask, GroupSpec, MaskBatch,
    SampleMethod,
};
use nodebag::layers::{DenseGrouped, DensePlain};
use nodebag::model::{Layer, Model};
use nodebag::model_io::{load_model, save_model};
use nodebag::ops::Activation;
use nodebag::rng::{stream_rng, uniform_tensor};
use nodebag::tensor::Tensor;

fn method_strategy() -> impl Strategy<Value = SampleMethod> {
    prop_oneof![Just(SampleMethod::A), Just(SampleMethod::B)]
}

proptest! {
    /// Every sampled mask entry is exactly 0 or 1, and under method B every
    /// (sample, group) slice is exactly one-hot.
    #[test]
    fn masks_are_binary_and_method_b_is_one_hot(
        seed in 0u64..1000,
        batch in 1usize..16,
        k in 1usize..6,
        n in 1usize..6,
        keep in 0.05f64..=1.0,
        method in method_strategy(),
    ) {
        let spec = GroupSpec::new(k, n, method, keep).unwrap();
        let mask = sample_mask::<f64>(&spec, batch, &mut stream_rng(seed, 1));
        for &v in mask.values().data() {
            prop_assert!(v == 0.0 || v == 1.0);
        }
        if method == SampleMethod::B {
            for b in 0..batch {
                for i in 0..k {
                    let ones: f64 = (0..n).map(|j| mask.values().at3(b, i, j)).sum();
                    prop_assert_eq!(ones, 1.0);
                }
            }
        }
    }

    /// The all-ones mask makes group_reduce a plain sum over members, and a
    /// method B mask selects exactly one member's value.
    #[test]
    fn group_reduce_matches_direct_computation(
        seed in 0u64..1000,
        batch in 1usize..8,
        k in 1usize..5,
        n in 1usize..5,
    ) {
        let mut rng = stream_rng(seed, 2);
        let outputs = uniform_tensor::<f64>(&[batch, k, n], 1.0, &mut rng);
        let ones = MaskBatch::<f64>::all_ones(batch, k, n);
        let summed = group_reduce(&outputs, &ones).unwrap();
        for b in 0..batch {
            for i in 0..k {
                let mut want = 0.0;
                for j in 0..n {
                    want += outputs.at3(b, i, j);
                }
                prop_assert!((summed.at2(b, i) - want).abs() < 1e-12);
            }
        }

        let spec = GroupSpec::new(k, n, SampleMethod::B, 0.5).unwrap();
        let mask = sample_mask::<f64>(&spec, batch, &mut rng);
        let selected = group_reduce(&outputs, &mask).unwrap();
        for b in 0..batch {
            for i in 0..k {
                let j = (0..n).find(|&j| mask.values().at3(b, i, j) == 1.0).unwrap();
                prop_assert_eq!(selected.at2(b, i), outputs.at3(b, i, j));
            }
        }
    }

    /// Group-mean averaging is bit-exactly idempotent for every group size,
    /// including the odd sizes where a naive sum/n mean is not.
    #[test]
    fn member_mean_is_bit_exact_idempotent(
        seed in 0u64..1000,
        k in 1usize..5,
        n in 1usize..7,
        fan_in in 1usize..6,
    ) {
        let mut rng = stream_rng(seed, 3);
        let weights = uniform_tensor::<f32>(&[k, n, fan_in], 1.0, &mut rng);
        let once = group_member_mean(&weights);
        let twice = group_member_mean(&once);
        let once_bits: Vec<u32> = once.data().iter().map(|v| v.to_bits()).collect();
        let twice_bits: Vec<u32> = twice.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(once_bits, twice_bits);
    }

    /// The empirical keep frequency stays within five standard errors of the
    /// marginal expectation for both sampling methods.
    #[test]
    fn expected_keep_matches_empirical_frequency(
        seed in 0u64..200,
        n in 1usize..5,
        keep in 0.1f64..=0.9,
        method in method_strategy(),
    ) {
        let spec = GroupSpec::new(2, n, method, keep).unwrap();
        let e = expected_keep(&spec);
        let samples = 4000usize;
        let mask = sample_mask::<f64>(&spec, samples, &mut stream_rng(seed, 4));
        let len = mask.values().len() as f64;
        let mean: f64 = mask.values().data().iter().sum::<f64>() / len;
        let se = (e * (1.0 - e) / len).sqrt().max(1e-9);
        prop_assert!((mean - e).abs() <= 5.0 * se,
            "mean {} vs expectation {} ({} se)", mean, e, (mean - e).abs() / se);
    }

    /// Model files have a canonical encoding: save -> load -> save produces
    /// identical bytes, and the reloaded parameters are bit-identical.
    #[test]
    fn model_files_round_trip_canonically(
        seed in 0u64..500,
        k in 1usize..4,
        n in 1usize..4,
        fan_in in 1usize..5,
        method in method_strategy(),
    ) {
        let spec = GroupSpec::new(k, n, method, 0.5).unwrap();
        let mut rng = stream_rng(seed, 5);
        let model: Model<f32> = Model::new(vec![
            Layer::Flatten,
            Layer::DenseGrouped(DenseGrouped::init(fan_in, spec, Activation::Relu, &mut rng)),
            Layer::DensePlain(DensePlain::init(k, 10, None, &mut rng)),
        ]);

        let dir = tempdir().unwrap();
        let first = dir.path().join("a.nbm");
        let second = dir.path().join("b.nbm");
        save_model(&model, &first).unwrap();
        let loaded: Model<f32> = load_model(&first).unwrap();
        save_model(&loaded, &second).unwrap();
        prop_assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());

        for (a, b) in model.params().iter().zip(loaded.params().iter()) {
            let a_bits: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let b_bits: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a_bits, b_bits);
        }
    }
}

/// Masked member outputs never leak: a zeroed member contributes nothing to
/// the reduction no matter its value.
#[test]
fn masked_members_never_leak() {
    let mut rng = stream_rng(9, 6);
    let mut outputs = uniform_tensor::<f64>(&[4, 3, 2], 1.0, &mut rng);
    // Poison member 1 of every group.
    for b in 0..4 {
        for i in 0..3 {
            outputs.data_mut()[(b * 3 + i) * 2 + 1] = 1e30;
        }
    }
    let mut mask_values = Tensor::<f64>::zeros(&[4, 3, 2]);
    for b in 0..4 {
        for i in 0..3 {
            mask_values.data_mut()[(b * 3 + i) * 2] = 1.0;
        }
    }
    let mask = MaskBatch::from_tensor(mask_values).unwrap();
    let reduced = group_reduce(&outputs, &mask).unwrap();
    assert!(reduced.data().iter().all(|v| v.abs() < 1e29));
}
