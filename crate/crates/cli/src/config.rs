//! Flat key=value config files and their resolution against flag overrides.
//! Precedence: built-in defaults, then config-file values, then flags.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nodebag::bagging::SampleMethod;
use nodebag::error::{Error, Result};
use nodebag::ops::Activation;
use nodebag::train::{Arch, EvalMode, TrainConfig};

use crate::{SweepArgs, TrainOverrides};

pub type ConfigMap = HashMap<String, String>;

const KNOWN_KEYS: &[&str] = &[
    "arch",
    "width",
    "method",
    "group_size",
    "keep_prob",
    "activation",
    "epochs",
    "batch_size",
    "avg_frequency",
    "seed",
    "val_fraction",
    "train_limit",
    "full_scale",
    "data_dir",
    "widths",
    "methods",
    "group_sizes",
    "seeds",
];

/// Parses a `key=value` file: one pair per line, `#` comments and blank
/// lines ignored, unknown keys rejected.
pub fn load_key_values(path: Option<&Path>) -> Result<ConfigMap> {
    let mut map = ConfigMap::new();
    let Some(path) = path else {
        return Ok(map);
    };
    let text = std::fs::read_to_string(path)?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::InvalidArg {
                op: "config",
                msg: format!("{}:{}: expected key=value, got {raw:?}", path.display(), lineno + 1),
            });
        };
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::InvalidArg {
                op: "config",
                msg: format!("{}:{}: unknown key {key:?}", path.display(), lineno + 1),
            });
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| Error::InvalidArg {
        op: "config",
        msg: format!("cannot parse {key}={value:?}"),
    })
}

fn file_value<T: FromStr>(file: &ConfigMap, key: &str) -> Result<Option<T>> {
    match file.get(key) {
        Some(v) => Ok(Some(parse_value(key, v)?)),
        None => Ok(None),
    }
}

/// Resolves the full training config plus the data directory.
pub fn resolve_train(
    overrides: &TrainOverrides,
    file: &ConfigMap,
) -> Result<(TrainConfig, PathBuf)> {
    let arch: Arch = match &overrides.arch {
        Some(s) => s.parse()?,
        None => match file.get("arch") {
            Some(s) => s.parse()?,
            None => Arch::MnistFc,
        },
    };
    let full_scale = overrides.full_scale
        || file_value::<bool>(file, "full_scale")?.unwrap_or(false);

    let mut config = TrainConfig::defaults(arch, full_scale);

    if let Some(v) = file_value::<f64>(file, "width")? {
        config.width = v;
    }
    if let Some(v) = file.get("method") {
        config.method = v.parse::<SampleMethod>()?;
    }
    if let Some(v) = file_value::<usize>(file, "group_size")? {
        config.group_size = v;
    }
    if let Some(v) = file_value::<f64>(file, "keep_prob")? {
        config.keep_prob = v;
    }
    if let Some(v) = file.get("activation") {
        config.activation = v.parse::<Activation>()?;
    }
    if let Some(v) = file_value::<usize>(file, "epochs")? {
        config.epochs = v;
    }
    if let Some(v) = file_value::<usize>(file, "batch_size")? {
        config.batch_size = v;
    }
    if let Some(v) = file_value::<usize>(file, "avg_frequency")? {
        config.avg_frequency = v;
    }
    if let Some(v) = file_value::<u64>(file, "seed")? {
        config.seed = v;
    }
    if let Some(v) = file_value::<f64>(file, "val_fraction")? {
        config.val_fraction = v;
    }
    if let Some(v) = file_value::<usize>(file, "train_limit")? {
        config.train_limit = Some(v);
    }

    if let Some(v) = overrides.width {
        config.width = v;
    }
    if let Some(v) = &overrides.method {
        config.method = v.parse::<SampleMethod>()?;
    }
    if let Some(v) = overrides.group_size {
        config.group_size = v;
    }
    if let Some(v) = overrides.keep_prob {
        config.keep_prob = v;
    }
    if let Some(v) = &overrides.activation {
        config.activation = v.parse::<Activation>()?;
    }
    if let Some(v) = overrides.epochs {
        config.epochs = v;
    }
    if let Some(v) = overrides.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = overrides.avg_frequency {
        config.avg_frequency = v;
    }
    if let Some(v) = overrides.seed {
        config.seed = v;
    }
    if let Some(v) = overrides.val_fraction {
        config.val_fraction = v;
    }
    if let Some(v) = overrides.train_limit {
        config.train_limit = Some(v);
    }

    let data_dir = overrides
        .data_dir
        .clone()
        .or_else(|| file.get("data_dir").map(PathBuf::from))
        .unwrap_or_else(|| match arch {
            Arch::MnistFc => PathBuf::from("data/mnist"),
            Arch::CnnC => PathBuf::from("data/cifar10"),
        });

    Ok((config, data_dir))
}

pub fn resolve_eval(mode: &str, compare: Option<&str>) -> Result<(EvalMode, Option<EvalMode>)> {
    let mode = mode.parse::<EvalMode>()?;
    let compare = compare.map(|c| c.parse::<EvalMode>()).transpose()?;
    Ok((mode, compare))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|piece| parse_value::<T>(key, piece.trim()))
        .collect()
}

fn parse_method_list(value: &str) -> Result<Vec<SampleMethod>> {
    value
        .split(',')
        .map(|piece| piece.trim().parse::<SampleMethod>())
        .collect()
}

pub type SweepAxes = (Vec<f64>, Vec<SampleMethod>, Vec<usize>, Vec<u64>);

/// Sweep axes: flags win over config-file lists; a missing axis collapses to
/// the base config's single value.
pub fn resolve_sweep_axes(
    args: &SweepArgs,
    file: &ConfigMap,
    base: &TrainConfig,
) -> Result<SweepAxes> {
    let widths = match (&args.widths, file.get("widths")) {
        (Some(v), _) => parse_list::<f64>("widths", v)?,
        (None, Some(v)) => parse_list::<f64>("widths", v)?,
        (None, None) => vec![base.width],
    };
    let methods = match (&args.methods, file.get("methods")) {
        (Some(v), _) => parse_method_list(v)?,
        (None, Some(v)) => parse_method_list(v)?,
        (None, None) => vec![base.method],
    };
    let group_sizes = match (&args.group_sizes, file.get("group_sizes")) {
        (Some(v), _) => parse_list::<usize>("group_sizes", v)?,
        (None, Some(v)) => parse_list::<usize>("group_sizes", v)?,
        (None, None) => vec![base.group_size],
    };
    let seeds = match (&args.seeds, file.get("seeds")) {
        (Some(v), _) => parse_list::<u64>("seeds", v)?,
        (None, Some(v)) => parse_list::<u64>("seeds", v)?,
        (None, None) => vec![base.seed],
    };
    Ok((widths, methods, group_sizes, seeds))
}
