//! End-to-end training: architecture construction, the epoch loop with
//! periodic weight averaging, evaluation of grouped and combined models, and
//! the sweep runner.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::bagging::{GroupSpec, SampleMethod};
use crate::data::{batches, split_train_val, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::layers::{ConvGrouped, ConvPlain, DenseGrouped, DensePlain};
use crate::ops::{softmax_cross_entropy, softmax_cross_entropy_vjp, Activation, Padding};
use crate::optim::{AdamState, LrSchedule};
use crate::rng::{stream_rng, STREAM_INIT, STREAM_MASKS};
use crate::scalar::{fl, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;
pub const DESK_MNIST_EPOCHS: usize = 30;
pub const DESK_CIFAR_EPOCHS: usize = 20;
pub const DESK_CIFAR_TRAIN_LIMIT: usize = 10_000;
pub const FULL_SCALE_EPOCHS: usize = 200;
const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    MnistFc,
    CnnC,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::MnistFc => write!(f, "mnist_fc"),
            Arch::CnnC => write!(f, "cnn_c"),
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist_fc" => Ok(Arch::MnistFc),
            "cnn_c" => Ok(Arch::CnnC),
            other => Err(Error::InvalidArg {
                op: "arch",
                msg: format!("unknown architecture {other:?} (expected mnist_fc|cnn_c)"),
            }),
        }
    }
}

/// Everything one training run depends on. Fully determines the run together
/// with the datasets: two runs with equal configs produce identical traces.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub arch: Arch,
    /// Groups per hidden layer (mnist_fc, integral) or the filter-count
    /// multiplier (cnn_c).
    pub width: f64,
    pub method: SampleMethod,
    pub group_size: usize,
    pub keep_prob: f64,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Epochs between weight averages; 0 disables averaging.
    pub avg_frequency: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Cap on training rows before the validation split (desk-scale runs).
    pub train_limit: Option<usize>,
}

impl TrainConfig {
    /// Defaults for an architecture: desk scale unless `full_scale`, which
    /// restores the full 200-epoch schedules and full datasets.
    pub fn defaults(arch: Arch, full_scale: bool) -> Self {
        let (epochs, schedule, train_limit) = match (arch, full_scale) {
            (Arch::MnistFc, false) => (DESK_MNIST_EPOCHS, LrSchedule::mnist_two_stage(), None),
            (Arch::MnistFc, true) => (FULL_SCALE_EPOCHS, LrSchedule::mnist_two_stage(), None),
            (Arch::CnnC, false) => (
                DESK_CIFAR_EPOCHS,
                LrSchedule::plateau_default(1e-3),
                Some(DESK_CIFAR_TRAIN_LIMIT),
            ),
            (Arch::CnnC, true) => (FULL_SCALE_EPOCHS, LrSchedule::plateau_default(1e-3), None),
        };
        Self {
            arch,
            width: match arch {
                Arch::MnistFc => 16.0,
                Arch::CnnC => 1.0,
            },
            method: SampleMethod::A,
            group_size: 1,
            keep_prob: 0.5,
            activation: Activation::Relu,
            epochs,
            batch_size: DEFAULT_BATCH_SIZE,
            schedule,
            avg_frequency: 10,
            seed: 1,
            val_fraction: DEFAULT_VAL_FRACTION,
            train_limit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width <= 0.0 {
            return Err(Error::InvalidArg {
                op: "train_config",
                msg: format!("width must be positive, got {}", self.width),
            });
        }
        if self.arch == Arch::MnistFc && self.width.fract() != 0.0 {
            return Err(Error::InvalidArg {
                op: "train_config",
                msg: format!("mnist_fc width must be an integer group count, got {}", self.width),
            });
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArg {
                op: "train_config",
                msg: "epochs must be at least 1".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArg {
                op: "train_config",
                msg: "batch size must be at least 1".into(),
            });
        }
        // Remaining group bounds are enforced by GroupSpec construction.
        GroupSpec::new(1, self.group_size, self.method, self.keep_prob)?;
        Ok(())
    }

    fn spec(&self, group_count: usize) -> Result<GroupSpec> {
        GroupSpec::new(group_count, self.group_size, self.method, self.keep_prob)
    }
}

/// One metrics line per epoch. Errors are combined-model classification
/// errors in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_error: f64,
    pub val_error: f64,
    pub test_error: f64,
    pub seconds: f64,
    pub lr: f64,
    pub averaged: bool,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "epoch,train_loss,train_error,val_error,test_error,seconds,lr,averaged";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.3},{},{}",
            self.epoch,
            self.train_loss,
            self.train_error,
            self.val_error,
            self.test_error,
            self.seconds,
            self.lr,
            self.averaged as u8
        )
    }

    /// The row with wall-clock timing removed, for reproducibility checks.
    pub fn csv_without_timing(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.epoch,
            self.train_loss,
            self.train_error,
            self.val_error,
            self.test_error,
            self.lr,
            self.averaged as u8
        )
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(MetricsRow::CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}

/// Train/validation/test triple one run consumes.
#[derive(Debug, Clone)]
pub struct Datasets<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

/// Applies the configured training-row cap, then the seeded validation split.
pub fn prepare_datasets<T: Scalar>(
    config: &TrainConfig,
    raw_train: &Dataset<T>,
    test: &Dataset<T>,
) -> Result<Datasets<T>> {
    let limited = match config.train_limit {
        Some(limit) => raw_train.take(limit),
        None => raw_train.clone(),
    };
    let (train, val) = split_train_val(&limited, config.val_fraction, config.seed)?;
    Ok(Datasets {
        train,
        val,
        test: test.clone(),
    })
}

fn scale_filters(base: usize, multiplier: f64) -> usize {
    ((base as f64 * multiplier).round() as usize).max(1)
}

/// Builds the training-form model for a config. Hidden layers are grouped;
/// the softmax head (and for cnn_c the final 1x1 convolution) stays plain.
pub fn build_model<T: Scalar>(config: &TrainConfig) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, STREAM_INIT);
    let act = config.activation;
    match config.arch {
        Arch::MnistFc => {
            let k = config.width as usize;
            let spec = config.spec(k)?;
            Ok(Model::new(vec![
                Layer::Flatten,
                Layer::DenseGrouped(DenseGrouped::init(784, spec, act, &mut rng)),
                Layer::DenseGrouped(DenseGrouped::init(k, spec, act, &mut rng)),
                Layer::DensePlain(DensePlain::init(k, 10, None, &mut rng)),
            ]))
        }
        Arch::CnnC => {
            let m = config.width;
            let widths = [
                scale_filters(64, m),
                scale_filters(64, m),
                scale_filters(128, m),
                scale_filters(128, m),
                scale_filters(192, m),
                scale_filters(192, m),
            ];
            let mut layers = Vec::new();
            let conv = |inp: usize,
                        out: usize,
                        kernel: usize,
                        padding: Padding,
                        cfg: &TrainConfig,
                        rng: &mut rand_chacha::ChaCha8Rng|
             -> Result<Layer<T>> {
                Ok(Layer::ConvGrouped(ConvGrouped::init(
                    inp,
                    (kernel, kernel),
                    cfg.spec(out)?,
                    1,
                    padding,
                    cfg.activation,
                    rng,
                )))
            };
            layers.push(conv(3, widths[0], 3, Padding::Same, config, &mut rng)?);
            layers.push(conv(widths[0], widths[1], 3, Padding::Same, config, &mut rng)?);
            layers.push(Layer::MaxPool { window: 3, stride: 2 });
            layers.push(conv(widths[1], widths[2], 3, Padding::Same, config, &mut rng)?);
            layers.push(conv(widths[2], widths[3], 3, Padding::Same, config, &mut rng)?);
            layers.push(Layer::MaxPool { window: 3, stride: 2 });
            // The last 3x3 convolution is the one valid-padded layer.
            layers.push(conv(widths[3], widths[4], 3, Padding::Valid, config, &mut rng)?);
            // Final 1x1 convolution and the softmax head are never grouped.
            layers.push(Layer::ConvPlain(ConvPlain::init(
                widths[4],
                widths[5],
                (1, 1),
                1,
                Padding::Same,
                Some(act),
                &mut rng,
            )));
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::DensePlain(DensePlain::init(
                widths[5],
                10,
                None,
                &mut rng,
            )));
            Ok(Model::new(layers))
        }
    }
}

/// Conv widths of the cnn_c architecture at a multiplier, for reporting.
pub fn cnn_c_widths(multiplier: f64) -> [usize; 6] {
    [
        scale_filters(64, multiplier),
        scale_filters(64, multiplier),
        scale_filters(128, multiplier),
        scale_filters(128, multiplier),
        scale_filters(192, multiplier),
        scale_filters(192, multiplier),
    ]
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    pub model: Model<T>,
    pub metrics: Vec<MetricsRow>,
}

/// Builds the model for `config` and trains it.
pub fn train<T: Scalar>(config: &TrainConfig, data: &Datasets<T>) -> Result<TrainOutput<T>> {
    let model = build_model(config)?;
    train_model(config, model, data)
}

/// Trains a caller-provided model under the config's loop: per batch, sample
/// masks, forward, backward, Adam step; after every `avg_frequency`-th epoch,
/// average members (weights and optimizer moments); after every epoch,
/// evaluate the combined model on the validation and test sets.
pub fn train_model<T: Scalar>(
    config: &TrainConfig,
    mut model: Model<T>,
    data: &Datasets<T>,
) -> Result<TrainOutput<T>> {
    config.validate()?;
    let mut adam = AdamState::new(&model);
    let grouping = model.param_grouping();
    let mut mask_rng = stream_rng(config.seed, STREAM_MASKS);
    let plan = BatchPlan {
        seed: config.seed,
        batch_size: config.batch_size,
    };
    let mut val_history: Vec<f64> = Vec::new();
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = config.schedule.lr_at(epoch, &val_history);
        let mut loss_sum = 0.0;
        let mut wrong = 0usize;
        let mut seen = 0usize;

        for (batch_idx, (images, labels)) in
            batches(&data.train, &plan, epoch)?.into_iter().enumerate()
        {
            let masks = model.sample_masks(labels.len(), &mut mask_rng);
            let (logits, states) = model.forward_train(&images, &masks)?;
            let (loss, probs) = softmax_cross_entropy(&logits, &labels)?;
            let loss_f = loss.to_f64().unwrap();
            if !loss_f.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += loss_f * labels.len() as f64;
            wrong += count_errors(&logits, &labels);
            seen += labels.len();

            let dlogits = softmax_cross_entropy_vjp(&probs, &labels)?;
            let grads = model.backward_train(&states, &dlogits)?;
            adam.step(&mut model, &grads, fl::<T>(lr))?;
        }

        let averaged = config.avg_frequency > 0 && (epoch + 1) % config.avg_frequency == 0;
        if averaged {
            model.weight_average();
            adam.average_groups(&grouping)?;
        }

        let combined = model.combine();
        let val_error = classification_error(&combined, &data.val)?;
        let test_error = classification_error(&combined, &data.test)?;
        val_history.push(val_error);

        metrics.push(MetricsRow {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_error: wrong as f64 / seen.max(1) as f64,
            val_error,
            test_error,
            seconds: started.elapsed().as_secs_f64(),
            lr,
            averaged,
        });
    }

    Ok(TrainOutput { model, metrics })
}

fn count_errors<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let classes = logits.dim(1);
    labels
        .iter()
        .enumerate()
        .filter(|&(b, &label)| argmax(&logits.data()[b * classes..(b + 1) * classes]) != label)
        .count()
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Classification error of a plain (combined) model over a dataset.
pub fn classification_error<T: Scalar>(model: &Model<T>, dataset: &Dataset<T>) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut wrong = 0usize;
    for start in (0..dataset.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(dataset.len());
        let indices: Vec<usize> = (start..end).collect();
        let piece = dataset.gather(&indices, &dataset.split);
        let logits = model.forward(&piece.images)?;
        wrong += count_errors(&logits, &piece.labels);
    }
    Ok(wrong as f64 / dataset.len() as f64)
}

/// How a grouped model is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Collapse every group to one node first (the deployment form).
    Combined,
    /// Exact mask-distribution expectation per group (enumeration oracle).
    Expected,
    /// Use only member 0 of each group (diagnostic).
    SingleMember,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Combined => write!(f, "combined"),
            EvalMode::Expected => write!(f, "expected"),
            EvalMode::SingleMember => write!(f, "single-member"),
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "combined" => Ok(EvalMode::Combined),
            "expected" => Ok(EvalMode::Expected),
            "single-member" | "single_member" => Ok(EvalMode::SingleMember),
            other => Err(Error::InvalidArg {
                op: "eval_mode",
                msg: format!("unknown mode {other:?} (expected combined|expected|single-member)"),
            }),
        }
    }
}

/// Predicted labels under an evaluation mode.
pub fn predictions<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset<T>,
    mode: EvalMode,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(dataset.len());
    let plain_form = match mode {
        EvalMode::Combined => Some(model.combine()),
        EvalMode::SingleMember => Some(model.single_member()),
        EvalMode::Expected => None,
    };
    for start in (0..dataset.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(dataset.len());
        let indices: Vec<usize> = (start..end).collect();
        let piece = dataset.gather(&indices, &dataset.split);
        let logits = match &plain_form {
            Some(m) => m.forward(&piece.images)?,
            None => model.forward_expected(&piece.images)?,
        };
        let classes = logits.dim(1);
        for b in 0..piece.len() {
            preds.push(argmax(&logits.data()[b * classes..(b + 1) * classes]));
        }
    }
    Ok(preds)
}

/// Classification error under an evaluation mode.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset<T>, mode: EvalMode) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let preds = predictions(model, dataset, mode)?;
    let wrong = preds
        .iter()
        .zip(&dataset.labels)
        .filter(|(p, l)| p != l)
        .count();
    Ok(wrong as f64 / dataset.len() as f64)
}

// ---------------------------------------------------------------------------
// Sweep runner
// ---------------------------------------------------------------------------

/// A grid of configurations: the cartesian product of the axes over a shared
/// base config.
#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub base: TrainConfig,
    pub widths: Vec<f64>,
    pub methods: Vec<SampleMethod>,
    pub group_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    /// All configs, sorted by `(width, method, group size, seed)`, which is
    /// the order sweep rows are produced and written in.
    pub fn expand(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &width in &self.widths {
            for &method in &self.methods {
                for &group_size in &self.group_sizes {
                    for &seed in &self.seeds {
                        let mut cfg = self.base.clone();
                        cfg.width = width;
                        cfg.method = method;
                        cfg.group_size = group_size;
                        cfg.seed = seed;
                        out.push(cfg);
                    }
                }
            }
        }
        out.sort_by(|a, b| {
            a.width
                .partial_cmp(&b.width)
                .unwrap()
                .then((a.method == SampleMethod::B).cmp(&(b.method == SampleMethod::B)))
                .then(a.group_size.cmp(&b.group_size))
                .then(a.seed.cmp(&b.seed))
        });
        out
    }
}

/// One sweep result row. `final_test_error` is empty when the run failed;
/// the failure is carried in `status` and the sweep continues.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub arch: Arch,
    pub width: f64,
    pub method: SampleMethod,
    pub group_size: usize,
    pub keep_prob: f64,
    pub avg_frequency: usize,
    pub epochs: usize,
    pub seed: u64,
    pub final_test_error: Option<f64>,
    pub grouped_params: usize,
    pub combined_params: usize,
    pub seconds: f64,
    pub status: String,
}

pub const SWEEP_CSV_HEADER: &str = "arch,width,method,group_size,keep_prob,avg_frequency,epochs,seed,final_test_error,grouped_params,combined_params,seconds,status";

impl SweepRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.3},{}",
            self.arch,
            self.width,
            self.method,
            self.group_size,
            self.keep_prob,
            self.avg_frequency,
            self.epochs,
            self.seed,
            self.final_test_error
                .map(|e| format!("{e:.6}"))
                .unwrap_or_default(),
            self.grouped_params,
            self.combined_params,
            self.seconds,
            self.status
        )
    }
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}

/// Runs every config in the grid against shared raw datasets. Each run gets
/// its own seeded subset/split; a failing run contributes an error row and
/// the sweep continues.
pub fn run_sweep<T: Scalar>(
    grid: &SweepGrid,
    raw_train: &Dataset<T>,
    test: &Dataset<T>,
    mut progress: impl FnMut(&TrainConfig, &SweepRow),
) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for config in grid.expand() {
        let started = Instant::now();
        let outcome = prepare_datasets(&config, raw_train, test)
            .and_then(|data| train(&config, &data));
        let (grouped_params, combined_params) = match build_model::<T>(&config) {
            Ok(model) => (model.param_count(), model.combine().param_count()),
            Err(_) => (0, 0),
        };
        let row = match outcome {
            Ok(output) => SweepRow {
                arch: config.arch,
                width: config.width,
                method: config.method,
                group_size: config.group_size,
                keep_prob: config.keep_prob,
                avg_frequency: config.avg_frequency,
                epochs: config.epochs,
                seed: config.seed,
                final_test_error: output.metrics.last().map(|m| m.test_error),
                grouped_params,
                combined_params,
                seconds: started.elapsed().as_secs_f64(),
                status: "ok".into(),
            },
            Err(err) => SweepRow {
                arch: config.arch,
                width: config.width,
                method: config.method,
                group_size: config.group_size,
                keep_prob: config.keep_prob,
                avg_frequency: config.avg_frequency,
                epochs: config.epochs,
                seed: config.seed,
                final_test_error: None,
                grouped_params,
                combined_params,
                seconds: started.elapsed().as_secs_f64(),
                status: format!("error: {err}").replace(',', ";"),
            },
        };
        progress(&config, &row);
        rows.push(row);
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform_tensor;

    /// Small deterministic multi-class dataset: one noisy template per class.
    pub(crate) fn toy_dataset(n: usize, seed: u64, name: &str) -> Dataset<f32> {
        let mut rng = stream_rng(seed, 7);
        let templates = uniform_tensor::<f32>(&[10, 16], 1.0, &mut rng);
        let mut data = Vec::with_capacity(n * 16);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 10;
            let noise = uniform_tensor::<f32>(&[16], 0.3, &mut rng);
            for f in 0..16 {
                data.push((templates.at2(class, f) + noise.data()[f]).clamp(-1.0, 1.0) * 0.5 + 0.5);
            }
            labels.push(class);
        }
        Dataset {
            images: Tensor::from_vec(vec![n, 1, 4, 4], data).unwrap(),
            labels,
            name: name.into(),
            split: "train".into(),
        }
    }

    fn toy_config(method: SampleMethod, group_size: usize, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            arch: Arch::MnistFc,
            width: 8.0,
            method,
            group_size,
            keep_prob: 0.5,
            activation: Activation::Relu,
            epochs,
            batch_size: 16,
            schedule: LrSchedule::constant(1e-3),
            avg_frequency: 2,
            seed,
            val_fraction: 0.2,
            train_limit: None,
        }
    }

    fn toy_datasets(seed: u64) -> Datasets<f32> {
        let raw = toy_dataset(120, 11, "toy");
        let test = toy_dataset(40, 12, "toy-test");
        let cfg = toy_config(SampleMethod::A, 2, 1, seed);
        prepare_datasets(&cfg, &raw, &test).unwrap()
    }

    fn fc_toy_model(config: &TrainConfig) -> Model<f32> {
        // 4x4 toy images: replace the 784-input architecture with the same
        // shape at fan-in 16.
        let k = config.width as usize;
        let spec = GroupSpec::new(k, config.group_size, config.method, config.keep_prob).unwrap();
        let mut rng = stream_rng(config.seed, STREAM_INIT);
        Model::new(vec![
            Layer::Flatten,
            Layer::DenseGrouped(DenseGrouped::init(16, spec, config.activation, &mut rng)),
            Layer::DenseGrouped(DenseGrouped::init(k, spec, config.activation, &mut rng)),
            Layer::DensePlain(DensePlain::init(k, 10, None, &mut rng)),
        ])
    }

    #[test]
    fn build_model_mnist_fc_param_count_matches_plain_at_n1() {
        let mut cfg = TrainConfig::defaults(Arch::MnistFc, false);
        cfg.width = 256.0;
        cfg.group_size = 1;
        let model = build_model::<f32>(&cfg).unwrap();
        let plain = 784 * 256 + 256 + 256 * 256 + 256 + 256 * 10 + 10;
        assert_eq!(model.param_count(), plain);
    }

    #[test]
    fn build_model_cnn_widths() {
        assert_eq!(cnn_c_widths(1.0), [64, 64, 128, 128, 192, 192]);
        assert_eq!(cnn_c_widths(0.5), [32, 32, 64, 64, 96, 96]);
        assert_eq!(cnn_c_widths(0.25), [16, 16, 32, 32, 48, 48]);
    }

    #[test]
    fn cnn_c_geometry_ends_in_6x6_maps() {
        let mut cfg = TrainConfig::defaults(Arch::CnnC, false);
        cfg.width = 0.125;
        cfg.group_size = 2;
        let model = build_model::<f32>(&cfg).unwrap();
        let x = Tensor::<f32>::zeros(&[2, 3, 32, 32]);
        let masks = model.sample_masks(2, &mut stream_rng(1, STREAM_MASKS));
        let (logits, states) = model.forward_train(&x, &masks).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        // The global-average-pool input is the 6x6 map stack.
        match &states[8] {
            crate::model::LayerState::GlobalAvgPool { input_shape } => {
                assert_eq!(&input_shape[2..], &[6, 6]);
            }
            other => panic!("unexpected state {other:?}"),
        }
    }

    #[test]
    fn averaging_fires_floor_epochs_over_frequency_times() {
        let data = toy_datasets(1);
        for (epochs, freq, want) in [(6usize, 2usize, 3usize), (5, 2, 2), (4, 4, 1), (3, 5, 0)] {
            let mut cfg = toy_config(SampleMethod::A, 2, epochs, 1);
            cfg.avg_frequency = freq;
            let model = fc_toy_model(&cfg);
            let out = train_model(&cfg, model, &data).unwrap();
            let fired = out.metrics.iter().filter(|m| m.averaged).count();
            assert_eq!(fired, want, "epochs {epochs} freq {freq}");
        }
    }

    #[test]
    fn avg_frequency_equal_to_epochs_never_fires_mid_run() {
        let data = toy_datasets(2);
        let mut cfg = toy_config(SampleMethod::A, 2, 4, 2);
        cfg.avg_frequency = 4;
        let model = fc_toy_model(&cfg);
        let out = train_model(&cfg, model, &data).unwrap();
        for row in &out.metrics[..out.metrics.len() - 1] {
            assert!(!row.averaged);
        }
        assert!(out.metrics.last().unwrap().averaged);
    }

    #[test]
    fn identical_configs_give_identical_traces() {
        let data = toy_datasets(3);
        let cfg = toy_config(SampleMethod::B, 3, 3, 3);
        let a = train_model(&cfg, fc_toy_model(&cfg), &data).unwrap();
        let b = train_model(&cfg, fc_toy_model(&cfg), &data).unwrap();
        for (ra, rb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ra.csv_without_timing(), rb.csv_without_timing());
        }
        for (pa, pb) in a.model.params().iter().zip(b.model.params().iter()) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn method_b_n1_trace_is_bit_identical_to_plain_network() {
        let data = toy_datasets(4);
        let cfg = toy_config(SampleMethod::B, 1, 3, 4);
        let grouped_run = train_model(&cfg, fc_toy_model(&cfg), &data).unwrap();

        // Plain twin: same init stream, plain layers.
        let mut rng = stream_rng(cfg.seed, STREAM_INIT);
        let plain = Model::new(vec![
            Layer::Flatten,
            Layer::DensePlain(DensePlain::init(16, 8, Some(Activation::Relu), &mut rng)),
            Layer::DensePlain(DensePlain::init(8, 8, Some(Activation::Relu), &mut rng)),
            Layer::DensePlain(DensePlain::init(8, 10, None, &mut rng)),
        ]);
        let plain_run = train_model(&cfg, plain, &data).unwrap();

        for (ra, rb) in grouped_run.metrics.iter().zip(&plain_run.metrics) {
            assert_eq!(ra.csv_without_timing(), rb.csv_without_timing());
        }
        let combined = grouped_run.model.combine();
        for (pa, pb) in combined.params().iter().zip(plain_run.model.params().iter()) {
            let a_bits: Vec<u32> = pa.data().iter().map(|v| v.to_bits()).collect();
            let b_bits: Vec<u32> = pb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a_bits, b_bits);
        }
    }

    #[test]
    fn evaluate_constant_label_model_has_zero_error() {
        // A head hard-wired to class 3 on a dataset whose labels are all 3.
        let plain = DensePlain {
            weights: Tensor::<f32>::zeros(&[10, 16]),
            biases: Tensor::from_vec(
                vec![10],
                (0..10).map(|i| if i == 3 { 5.0 } else { 0.0 }).collect(),
            )
            .unwrap(),
            activation: None,
        };
        let model = Model::new(vec![Layer::Flatten, Layer::DensePlain(plain)]);
        let mut ds = toy_dataset(30, 21, "const");
        ds.labels = vec![3; 30];
        assert_eq!(evaluate(&model, &ds, EvalMode::Combined).unwrap(), 0.0);
    }

    #[test]
    fn combined_and_single_member_agree_for_b_n1() {
        let cfg = toy_config(SampleMethod::B, 1, 2, 5);
        let data = toy_datasets(5);
        let out = train_model(&cfg, fc_toy_model(&cfg), &data).unwrap();
        let a = predictions(&out.model, &data.test, EvalMode::Combined).unwrap();
        let b = predictions(&out.model, &data.test, EvalMode::SingleMember).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_grid_cardinality_and_param_arithmetic() {
        let mut base = toy_config(SampleMethod::A, 1, 1, 1);
        base.arch = Arch::MnistFc;
        base.width = 4.0;
        let grid = SweepGrid {
            base,
            widths: vec![4.0],
            methods: vec![SampleMethod::A],
            group_sizes: vec![1, 2, 4],
            seeds: vec![1, 2, 3],
        };
        assert_eq!(grid.expand().len(), 9);

        for cfg in grid.expand() {
            let model = build_model::<f32>(&cfg).unwrap();
            let combined = model.combine();
            let grouped_layer_params: usize = model
                .layers
                .iter()
                .filter(|l| l.group_spec().is_some())
                .map(|l| l.param_count())
                .sum();
            let other: usize = model.param_count() - grouped_layer_params;
            assert_eq!(
                combined.param_count(),
                grouped_layer_params / cfg.group_size + other
            );
        }
    }

    #[test]
    fn members_are_bit_identical_after_an_averaging_epoch() {
        let cfg = toy_config(SampleMethod::A, 3, 4, 7);
        let data = toy_datasets(7);
        let out = train_model(&cfg, fc_toy_model(&cfg), &data).unwrap();
        assert!(out.metrics.last().unwrap().averaged);
        for layer in &out.model.layers {
            if let Layer::DenseGrouped(l) = layer {
                let (k, n) = (l.spec.group_count(), l.spec.group_size());
                let fan_in = l.fan_in();
                for i in 0..k {
                    for j in 1..n {
                        for f in 0..fan_in {
                            assert_eq!(
                                l.weights.at3(i, j, f).to_bits(),
                                l.weights.at3(i, 0, f).to_bits()
                            );
                        }
                        assert_eq!(l.biases.at2(i, j).to_bits(), l.biases.at2(i, 0).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn saved_and_reloaded_models_evaluate_identically() {
        let cfg = toy_config(SampleMethod::A, 2, 2, 8);
        let data = toy_datasets(8);
        let out = train_model(&cfg, fc_toy_model(&cfg), &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nbm");
        crate::model_io::save_model(&out.model, &path).unwrap();
        let loaded: Model<f32> = crate::model_io::load_model(&path).unwrap();
        for mode in [EvalMode::Combined, EvalMode::Expected, EvalMode::SingleMember] {
            let a = evaluate(&out.model, &data.test, mode).unwrap();
            let b = evaluate(&loaded, &data.test, mode).unwrap();
            assert_eq!(a, b, "mode {mode}");
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_epoch_and_batch() {
        let cfg = toy_config(SampleMethod::A, 2, 3, 9);
        let data = toy_datasets(9);
        let mut model = fc_toy_model(&cfg);
        // Poison one weight so the first forward pass overflows.
        if let Layer::DenseGrouped(l) = &mut model.layers[1] {
            l.weights.data_mut()[0] = f32::MAX;
            l.weights.data_mut()[1] = f32::MAX;
        }
        let err = train_model(&cfg, model, &data).unwrap_err();
        assert!(
            matches!(err, Error::Diverged { epoch: 0, batch: 0 }),
            "unexpected error {err:?}"
        );
    }

    #[test]
    fn expected_mode_rejects_unenumerable_group_sizes() {
        let mut cfg = toy_config(SampleMethod::A, 21, 1, 6);
        cfg.avg_frequency = 0;
        let model = fc_toy_model(&cfg);
        let ds = toy_dataset(4, 41, "overflow");
        let err = evaluate(&model, &ds, EvalMode::Expected).unwrap_err();
        assert!(matches!(err, Error::EnumerationTooLarge { group_size: 21, .. }));
    }

    #[test]
    fn lr_comes_from_validation_history_only() {
        // Plateau schedules must see validation error, never test error: feed
        // a fabricated history and check the rate matches the history alone.
        let schedule = LrSchedule::plateau_default(1e-3);
        let val_history = vec![0.9, 0.8, 0.7, 0.6];
        assert_eq!(schedule.lr_at(4, &val_history), 1e-3);
    }
}
