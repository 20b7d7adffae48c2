//! Runtime self-check suite behind the CLI `check` verb: gradient checks for
//! every layer kind, combination-vs-enumeration fidelity, degenerate
//! equivalences, and file-format round-trips. All numeric checks run in
//! 64-bit mode.

use rand::Rng;

use crate::bagging::{exact_expected_output, sample_mask, GroupSpec, MaskBatch, SampleMethod};
use crate::layers::{ConvGrouped, ConvPlain, DenseGrouped, DensePlain};
use crate::model::{Layer, LayerGrads, Model};
use crate::model_io::{load_model, save_model};
use crate::ops::{softmax_cross_entropy, softmax_cross_entropy_vjp, Activation, Padding};
use crate::rng::{stream_rng, uniform_tensor};
use crate::tensor::Tensor;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Central finite differences of the scalar loss with respect to one
/// parameter tensor of a model, compared against the backward pass.
/// Returns the worst relative error observed.
pub fn finite_difference_check(
    model: &mut Model<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    masks: &[Option<MaskBatch<f64>>],
    slot: usize,
    step: f64,
    kink_margin: f64,
) -> f64 {
    let loss_of = |m: &Model<f64>| -> f64 {
        let (logits, _) = m.forward_train(input, masks).unwrap();
        softmax_cross_entropy(&logits, labels).unwrap().0
    };

    let (logits, states) = model.forward_train(input, masks).unwrap();
    let (_, probs) = softmax_cross_entropy(&logits, labels).unwrap();
    let dlogits = softmax_cross_entropy_vjp(&probs, labels).unwrap();
    let grads = model.backward_train(&states, &dlogits).unwrap();
    let analytic = flatten_grads(model, &grads)[slot].clone();

    let mut worst = 0.0f64;
    let len = model.params()[slot].len();
    for idx in 0..len {
        let original = model.params()[slot].data()[idx];
        model.params_mut()[slot].data_mut()[idx] = original + step;
        let plus = loss_of(model);
        model.params_mut()[slot].data_mut()[idx] = original - step;
        let minus = loss_of(model);
        model.params_mut()[slot].data_mut()[idx] = original;

        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[idx];
        let denom = a.abs().max(numeric.abs());
        if denom < kink_margin {
            continue;
        }
        let rel = (a - numeric).abs() / denom.max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

fn flatten_grads<'a>(model: &Model<f64>, grads: &'a [LayerGrads<f64>]) -> Vec<&'a Tensor<f64>> {
    model.grad_tensors(grads).expect("grads align with layers")
}

/// Builds one small model per layer kind and finite-difference-checks every
/// parameter slot at 1e-5 relative tolerance with fixed masks.
pub fn gradient_checks() -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut rng = stream_rng(97, 0);

    // Dense stack: grouped dense (relu + tanh), plain dense head.
    {
        let spec = GroupSpec::new(3, 2, SampleMethod::A, 0.5).unwrap();
        let mut model = Model::new(vec![
            Layer::DenseGrouped(DenseGrouped::init(5, spec, Activation::Relu, &mut rng)),
            Layer::DenseGrouped(DenseGrouped::init(3, spec, Activation::Tanh, &mut rng)),
            Layer::DensePlain(DensePlain::init(3, 4, Some(Activation::Sigmoid), &mut rng)),
            Layer::DensePlain(DensePlain::init(4, 3, None, &mut rng)),
        ]);
        let input = uniform_tensor::<f64>(&[4, 5], 1.0, &mut rng);
        let labels = vec![0, 1, 2, 1];
        let masks = model.sample_masks(4, &mut rng);
        results.push(run_grad_check(
            "gradients: dense stack (grouped relu/tanh, plain sigmoid, head)",
            &mut model,
            &input,
            &labels,
            &masks,
        ));
    }

    // Conv stack: grouped conv, max pool, plain conv, global average pool.
    {
        let spec = GroupSpec::new(2, 2, SampleMethod::B, 0.5).unwrap();
        let mut model = Model::new(vec![
            Layer::ConvGrouped(ConvGrouped::init(
                1,
                (3, 3),
                spec,
                1,
                Padding::Same,
                Activation::Relu,
                &mut rng,
            )),
            Layer::MaxPool {
                window: 3,
                stride: 2,
            },
            Layer::ConvPlain(ConvPlain::init(
                2,
                3,
                (3, 3),
                1,
                Padding::Valid,
                Some(Activation::Tanh),
                &mut rng,
            )),
            Layer::GlobalAvgPool,
            Layer::DensePlain(DensePlain::init(3, 3, None, &mut rng)),
        ]);
        let input = uniform_tensor::<f64>(&[2, 1, 6, 6], 1.0, &mut rng);
        let labels = vec![0, 2];
        let masks = model.sample_masks(2, &mut rng);
        results.push(run_grad_check(
            "gradients: conv stack (grouped conv, maxpool, plain conv, gap)",
            &mut model,
            &input,
            &labels,
            &masks,
        ));
    }

    results
}

fn run_grad_check(
    name: &'static str,
    model: &mut Model<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    masks: &[Option<MaskBatch<f64>>],
) -> CheckResult {
    let slots = model.params().len();
    let mut worst = 0.0f64;
    for slot in 0..slots {
        let rel = finite_difference_check(model, input, labels, masks, slot, 1e-5, 1e-4);
        if rel > worst {
            worst = rel;
        }
    }
    CheckResult {
        name,
        passed: worst < 1e-5,
        detail: format!("worst relative error {worst:.3e} (tolerance 1e-5)"),
    }
}

/// Combined output vs exact mask-enumeration expectation on relu's linear
/// region, over randomized grouped dense layers of both methods.
pub fn combination_fidelity(cases: usize) -> CheckResult {
    let mut rng = stream_rng(131, 0);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let k = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=4);
        let method = if case % 2 == 0 {
            SampleMethod::A
        } else {
            SampleMethod::B
        };
        let keep = rng.gen_range(0.2..=1.0);
        let spec = GroupSpec::new(k, n, method, keep).unwrap();
        let fan_in = rng.gen_range(1..=6);

        // Positive weights, biases, and inputs keep all member
        // pre-activations strictly positive.
        let weights =
            uniform_tensor::<f64>(&[k, n, fan_in], 1.0, &mut rng).map(|v| v.abs() + 0.05);
        let biases = uniform_tensor::<f64>(&[k, n], 1.0, &mut rng).map(|v| v.abs() + 0.05);
        let input = uniform_tensor::<f64>(&[1, fan_in], 1.0, &mut rng).map(|v| v.abs() + 0.05);

        let layer = DenseGrouped {
            spec,
            weights,
            biases,
            activation: Activation::Relu,
        };
        let pre = layer.member_pre_activations(&input).unwrap();
        let mut pre_kn = Tensor::zeros(&[k, n]);
        for i in 0..k {
            for j in 0..n {
                pre_kn.data_mut()[i * n + j] = pre.at3(0, i, j);
            }
        }
        let expected = exact_expected_output(&pre_kn, &spec, Activation::Relu).unwrap();

        let combined = layer.combine();
        let out = combined.forward(&input).unwrap();
        for i in 0..k {
            let rel = (out.at2(0, i) - expected.data()[i]).abs() / expected.data()[i].abs();
            if rel > worst {
                worst = rel;
            }
        }
    }
    CheckResult {
        name: "combination fidelity: combine vs exact mask enumeration (linear region)",
        passed: worst < 1e-6,
        detail: format!("{cases} random layers, worst relative error {worst:.3e} (tolerance 1e-6)"),
    }
}

/// Method A with group size 1 reproduces a reference dropout layer bit for
/// bit; method B with group size 1 reproduces a plain layer bit for bit.
pub fn degenerate_equivalences() -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut rng = stream_rng(151, 0);

    {
        let spec = GroupSpec::new(5, 1, SampleMethod::A, 0.5).unwrap();
        let grouped = DenseGrouped::<f64>::init(4, spec, Activation::Relu, &mut rng);
        let plain = DensePlain {
            weights: grouped.weights.clone().reshape(vec![5, 4]).unwrap(),
            biases: grouped.biases.clone().reshape(vec![5]).unwrap(),
            activation: Some(Activation::Relu),
        };
        let x = uniform_tensor::<f64>(&[6, 4], 1.0, &mut rng);
        let mask = sample_mask::<f64>(&spec, 6, &mut rng);
        let (got, _) = grouped.forward_train(&x, &mask).unwrap();
        let mut want = plain.forward(&x).unwrap();
        for b in 0..6 {
            for i in 0..5 {
                want.data_mut()[b * 5 + i] *= mask.values().at3(b, i, 0);
            }
        }
        let exact = got.data() == want.data();
        results.push(CheckResult {
            name: "degenerate: method A, n=1 equals reference dropout bit-exactly",
            passed: exact,
            detail: if exact { "outputs identical".into() } else { "outputs differ".into() },
        });
    }

    {
        let spec = GroupSpec::new(5, 1, SampleMethod::B, 0.5).unwrap();
        let grouped = DenseGrouped::<f64>::init(4, spec, Activation::Relu, &mut rng);
        let plain = DensePlain {
            weights: grouped.weights.clone().reshape(vec![5, 4]).unwrap(),
            biases: grouped.biases.clone().reshape(vec![5]).unwrap(),
            activation: Some(Activation::Relu),
        };
        let x = uniform_tensor::<f64>(&[6, 4], 1.0, &mut rng);
        let mask = sample_mask::<f64>(&spec, 6, &mut rng);
        let (got, _) = grouped.forward_train(&x, &mask).unwrap();
        let want = plain.forward(&x).unwrap();
        let exact = got.data() == want.data();
        results.push(CheckResult {
            name: "degenerate: method B, n=1 equals plain network bit-exactly",
            passed: exact,
            detail: if exact { "outputs identical".into() } else { "outputs differ".into() },
        });
    }

    results
}

/// Model save/load and IDX/CIFAR writer/reader round-trips in a temp dir.
pub fn round_trips() -> Vec<CheckResult> {
    let mut results = Vec::new();
    let dir = std::env::temp_dir().join(format!("nodebag-check-{}", std::process::id()));
    let _ = std::fs::create_dir_all(&dir);

    {
        let spec = GroupSpec::new(2, 3, SampleMethod::A, 0.5).unwrap();
        let mut rng = stream_rng(163, 0);
        let model: Model<f32> = Model::new(vec![
            Layer::Flatten,
            Layer::DenseGrouped(DenseGrouped::init(9, spec, Activation::Relu, &mut rng)),
            Layer::DensePlain(DensePlain::init(2, 10, None, &mut rng)),
        ]);
        let path = dir.join("model.nbm");
        let passed = save_model(&model, &path).is_ok()
            && match load_model::<f32>(&path) {
                Ok(loaded) => {
                    loaded.param_count() == model.param_count()
                        && loaded
                            .params()
                            .iter()
                            .zip(model.params().iter())
                            .all(|(a, b)| a.data() == b.data())
                }
                Err(_) => false,
            };
        results.push(CheckResult {
            name: "round-trip: model save/load is bit-identical",
            passed,
            detail: path.display().to_string(),
        });
    }

    {
        let images_path = dir.join("images-idx3-ubyte");
        let labels_path = dir.join("labels-idx1-ubyte");
        let pixels: Vec<u8> = (0u8..18).collect();
        let ok = crate::data::write_idx_images(&images_path, &pixels, 2, 3, 3).is_ok()
            && crate::data::write_idx_labels(&labels_path, &[3, 8]).is_ok();
        let passed = ok
            && match crate::data::load_mnist_idx::<f64>(&images_path, &labels_path) {
                Ok(ds) => {
                    ds.len() == 2
                        && ds
                            .images
                            .data()
                            .iter()
                            .zip(&pixels)
                            .all(|(v, &p)| *v == p as f64 / 255.0)
                }
                Err(_) => false,
            };
        results.push(CheckResult {
            name: "round-trip: IDX writer/reader recovers exact pixels",
            passed,
            detail: images_path.display().to_string(),
        });
    }

    {
        let path = dir.join("cifar.bin");
        let pixels: Vec<u8> = (0..3072).map(|i| (i % 256) as u8).collect();
        let ok = crate::data::write_cifar_batch(&path, &[(9, pixels.clone())]).is_ok();
        let passed = ok
            && match crate::data::load_cifar10_binary::<f64>(std::slice::from_ref(&path)) {
                Ok(ds) => {
                    ds.labels == vec![9]
                        && ds
                            .images
                            .data()
                            .iter()
                            .zip(&pixels)
                            .all(|(v, &p)| *v == p as f64 / 255.0)
                }
                Err(_) => false,
            };
        results.push(CheckResult {
            name: "round-trip: CIFAR-10 record writer/reader recovers exact bytes",
            passed,
            detail: path.display().to_string(),
        });
    }

    let _ = std::fs::remove_dir_all(&dir);
    results
}

/// The full oracle suite: every property the `check` verb reports.
pub fn run_all() -> Vec<CheckResult> {
    let mut results = gradient_checks();
    results.push(combination_fidelity(100));
    results.extend(degenerate_equivalences());
    results.extend(round_trips());
    results
}
