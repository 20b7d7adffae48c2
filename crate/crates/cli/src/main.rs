mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nodebag::data::Dataset;
use nodebag::error::Error;
use nodebag::model_io::{load_model, save_model};
use nodebag::train::{
    evaluate, metrics_to_csv, predictions, prepare_datasets, run_sweep, sweep_to_csv, train, Arch,
    SweepGrid, TrainConfig,
};

use config::{load_key_values, resolve_eval, resolve_sweep_axes, resolve_train, ConfigMap};

/// Exit codes: 0 success, 2 bad flags/config, 3 missing or unreadable data
/// files, 4 training divergence, 1 anything else.
const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_OTHER: u8 = 1;

#[derive(Parser)]
#[command(
    name = "nodebag",
    about = "Internal node bagging: grouped-node training with analytic combination for inference",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a model file and a per-epoch metrics CSV.
    Train(TrainArgs),
    /// Collapse every grouped layer of a saved model into single nodes.
    Combine(CombineArgs),
    /// Report the classification error of a saved model on a dataset split.
    Eval(EvalArgs),
    /// Run a grid of training configs and aggregate one CSV row per run.
    Sweep(SweepArgs),
    /// Run the built-in oracle suite (gradient checks, combination fidelity,
    /// degenerate equivalences, round-trips) and report pass/fail per property.
    Check,
}

#[derive(Args, Clone, Default)]
struct TrainOverrides {
    /// Flat key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture: mnist_fc or cnn_c.
    #[arg(long)]
    arch: Option<String>,
    /// Groups per hidden layer (mnist_fc) or filter multiplier (cnn_c).
    #[arg(long)]
    width: Option<f64>,
    /// Sampling method: A (independent Bernoulli) or B (one member per group).
    #[arg(long)]
    method: Option<String>,
    /// Members per group.
    #[arg(long)]
    group_size: Option<usize>,
    /// Keep probability for method A.
    #[arg(long)]
    keep_prob: Option<f64>,
    /// Hidden activation: relu, sigmoid, or tanh.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs between weight averages (0 disables averaging).
    #[arg(long)]
    avg_frequency: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of training data held out for validation.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Cap on training rows before the validation split.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Full-scale schedules (200 epochs, full datasets).
    #[arg(long)]
    full_scale: bool,
    /// Directory holding the dataset files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Output model file.
    #[arg(long, default_value = "model.nbm")]
    out_model: PathBuf,
    /// Output metrics CSV.
    #[arg(long, default_value = "metrics.csv")]
    out_csv: PathBuf,
}

#[derive(Args)]
struct CombineArgs {
    /// Input (grouped) model file.
    #[arg(long)]
    model: PathBuf,
    /// Output combined model file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model file to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Directory holding the dataset files.
    #[arg(long)]
    data_dir: PathBuf,
    /// Dataset family the files belong to: mnist or cifar10.
    #[arg(long, default_value = "mnist")]
    dataset: String,
    /// Which split to evaluate: train or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Evaluation mode: combined, expected, or single-member.
    #[arg(long, default_value = "combined")]
    mode: String,
    /// Also run this mode and report the prediction agreement rate.
    #[arg(long)]
    compare: Option<String>,
    /// Evaluate only the first N rows.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Comma-separated width axis, e.g. 16,32,64.
    #[arg(long)]
    widths: Option<String>,
    /// Comma-separated method axis, e.g. A,B.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated group-size axis, e.g. 1,2,4.
    #[arg(long)]
    group_sizes: Option<String>,
    /// Comma-separated seed axis, e.g. 1,2,3.
    #[arg(long)]
    seeds: Option<String>,
    /// Output CSV path.
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Combine(args) => cmd_combine(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Check => cmd_check(),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Io(_)
        | Error::IdxWrongMagic { .. }
        | Error::Truncated { .. }
        | Error::CountMismatch { .. }
        | Error::BadRecordSize { .. } => EXIT_DATA,
        Error::InvalidArg { .. } => EXIT_USAGE,
        _ => EXIT_OTHER,
    }
}

/// Loads the raw train and test sets for an architecture from a data dir.
/// mnist_fc reads IDX files, cnn_c reads the CIFAR-10 binary batches.
fn load_raw(arch: Arch, data_dir: &Path) -> nodebag::Result<(Dataset<f32>, Dataset<f32>)> {
    match arch {
        Arch::MnistFc => {
            let train = nodebag::data::load_mnist_idx::<f32>(
                &data_dir.join("train-images-idx3-ubyte"),
                &data_dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = nodebag::data::load_mnist_idx::<f32>(
                &data_dir.join("t10k-images-idx3-ubyte"),
                &data_dir.join("t10k-labels-idx1-ubyte"),
            )?;
            Ok((train, test))
        }
        Arch::CnnC => {
            let batches: Vec<PathBuf> = (1..=5)
                .map(|i| data_dir.join(format!("data_batch_{i}.bin")))
                .collect();
            let train = nodebag::data::load_cifar10_binary::<f32>(&batches)?;
            let test =
                nodebag::data::load_cifar10_binary::<f32>(&[data_dir.join("test_batch.bin")])?;
            Ok((train, test))
        }
    }
}

/// Every resolved setting as `key=value` lines, echoed into CSV headers so a
/// run is self-describing.
fn config_echo(config: &TrainConfig, data_dir: &Path) -> Vec<String> {
    let mut lines = vec![
        format!("# arch={}", config.arch),
        format!("# width={}", config.width),
        format!("# method={}", config.method),
        format!("# group_size={}", config.group_size),
        format!("# keep_prob={}", config.keep_prob),
        format!("# activation={}", config.activation),
        format!("# epochs={}", config.epochs),
        format!("# batch_size={}", config.batch_size),
        format!("# avg_frequency={}", config.avg_frequency),
        format!("# seed={}", config.seed),
        format!("# val_fraction={}", config.val_fraction),
        format!("# schedule={:?}", config.schedule),
        format!("# data_dir={}", data_dir.display()),
    ];
    if let Some(limit) = config.train_limit {
        lines.push(format!("# train_limit={limit}"));
    }
    lines
}

fn cmd_train(args: TrainArgs) -> nodebag::Result<u8> {
    let file_values: ConfigMap = load_key_values(args.overrides.config.as_deref())?;
    let (config, data_dir) = resolve_train(&args.overrides, &file_values)?;
    config.validate()?;

    let (raw_train, test) = load_raw(config.arch, &data_dir)?;
    let data = prepare_datasets(&config, &raw_train, &test)?;
    eprintln!(
        "training {} width {} method {} n {} on {} train / {} val / {} test rows",
        config.arch,
        config.width,
        config.method,
        config.group_size,
        data.train.len(),
        data.val.len(),
        data.test.len()
    );

    let output = train(&config, &data)?;
    for row in &output.metrics {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train_err {:.4}  val_err {:.4}  test_err {:.4}  lr {}{}",
            row.epoch,
            row.train_loss,
            row.train_error,
            row.val_error,
            row.test_error,
            row.lr,
            if row.averaged { "  [averaged]" } else { "" }
        );
    }

    save_model(&output.model, &args.out_model)?;
    let mut csv = config_echo(&config, &data_dir).join("\n");
    csv.push('\n');
    csv.push_str(&metrics_to_csv(&output.metrics));
    std::fs::write(&args.out_csv, csv)?;
    println!(
        "wrote {} and {} ({} epochs)",
        args.out_model.display(),
        args.out_csv.display(),
        output.metrics.len()
    );
    Ok(EXIT_OK)
}

fn cmd_combine(args: CombineArgs) -> nodebag::Result<u8> {
    let model = load_model::<f32>(&args.model)?;
    let combined = model.combine();
    save_model(&combined, &args.out)?;
    let before = model.param_count();
    let after = combined.param_count();
    println!(
        "combined {} -> {}: params {} -> {} ({:.2}x reduction)",
        args.model.display(),
        args.out.display(),
        before,
        after,
        before as f64 / after as f64
    );
    Ok(EXIT_OK)
}

fn cmd_eval(args: EvalArgs) -> nodebag::Result<u8> {
    let model = load_model::<f32>(&args.model)?;
    let arch = match args.dataset.to_ascii_lowercase().as_str() {
        "mnist" => Arch::MnistFc,
        "cifar10" => Arch::CnnC,
        other => {
            return Err(Error::InvalidArg {
                op: "eval",
                msg: format!("unknown dataset {other:?} (expected mnist|cifar10)"),
            })
        }
    };
    let (train_ds, test_ds) = load_raw(arch, &args.data_dir)?;
    let mut dataset = match args.split.as_str() {
        "train" => train_ds,
        "test" => test_ds,
        other => {
            return Err(Error::InvalidArg {
                op: "eval",
                msg: format!("unknown split {other:?} (expected train|test)"),
            })
        }
    };
    if let Some(limit) = args.limit {
        dataset = dataset.take(limit);
    }

    let (mode, compare) = resolve_eval(&args.mode, args.compare.as_deref())?;
    let error = evaluate(&model, &dataset, mode)?;
    match compare {
        None => {
            println!(
                "error_rate={error:.6} mode={mode} split={} n={}",
                args.split,
                dataset.len()
            );
        }
        Some(other_mode) => {
            let a = predictions(&model, &dataset, mode)?;
            let b = predictions(&model, &dataset, other_mode)?;
            let agree = a.iter().zip(&b).filter(|(x, y)| x == y).count();
            let rate = agree as f64 / a.len().max(1) as f64;
            let other_error = evaluate(&model, &dataset, other_mode)?;
            println!(
                "error_rate={error:.6} mode={mode} error_rate_{other_mode}={other_error:.6} agreement={rate:.6} split={} n={}",
                args.split,
                dataset.len()
            );
        }
    }
    Ok(EXIT_OK)
}

fn cmd_sweep(args: SweepArgs) -> nodebag::Result<u8> {
    let file_values: ConfigMap = load_key_values(args.overrides.config.as_deref())?;
    let (base, data_dir) = resolve_train(&args.overrides, &file_values)?;
    let axes = resolve_sweep_axes(&args, &file_values, &base)?;
    let grid = SweepGrid {
        base,
        widths: axes.0,
        methods: axes.1,
        group_sizes: axes.2,
        seeds: axes.3,
    };

    let (raw_train, test) = load_raw(grid.base.arch, &data_dir)?;
    let rows = run_sweep(&grid, &raw_train, &test, |config, row| {
        eprintln!(
            "width {} method {} n {} seed {}: {}",
            config.width,
            config.method,
            config.group_size,
            config.seed,
            row.final_test_error
                .map(|e| format!("test_err {e:.4}"))
                .unwrap_or_else(|| row.status.clone())
        );
    });
    std::fs::write(&args.out, sweep_to_csv(&rows))?;
    println!("wrote {} ({} rows)", args.out.display(), rows.len());
    Ok(EXIT_OK)
}

fn cmd_check() -> nodebag::Result<u8> {
    let results = nodebag::check::run_all();
    let mut all_passed = true;
    for result in &results {
        let status = if result.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {} - {}", result.name, result.detail);
        all_passed &= result.passed;
    }
    if all_passed {
        println!("all {} checks passed", results.len());
        Ok(EXIT_OK)
    } else {
        Err(Error::InvalidArg {
            op: "check",
            msg: "one or more self-checks failed".into(),
        })
    }
}
