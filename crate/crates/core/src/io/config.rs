//! Flat `key = value` training configuration files.
//!
//! Blank lines and `#` comments are ignored. Real-valued keys also accept a
//! fraction such as `1/3`.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub const KEYS: [&str; 13] = [
    "learning_rate",
    "momentum",
    "batch_size",
    "lambda_l",
    "lambda_h",
    "crop_fraction",
    "iterations",
    "seed",
    "stages",
    "sigma",
    "lr_resolution",
    "variant",
    "width_divisor",
];

fn real(key: &str, value: &str) -> Result<f64> {
    let bad = || Error::config(format!("{key}: `{value}` is not a number"));
    let parsed = match value.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            n / d
        }
        None => value.parse().map_err(|_| bad())?,
    };
    if !parsed.is_finite() {
        return Err(bad());
    }
    Ok(parsed)
}

fn parsed<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse `{value}`")))
}

/// Sets one field by name. Unknown keys are rejected.
pub fn set_config_value(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    match key.trim() {
        "learning_rate" => cfg.learning_rate = real(key, value)?,
        "momentum" => cfg.momentum = real(key, value)?,
        "batch_size" => cfg.batch_size = parsed(key, value)?,
        "lambda_l" => cfg.lambda_l = real(key, value)?,
        "lambda_h" => cfg.lambda_h = real(key, value)?,
        "crop_fraction" => cfg.crop_fraction = real(key, value)?,
        "iterations" => cfg.iterations = parsed(key, value)?,
        "seed" => cfg.seed = parsed(key, value)?,
        "stages" => cfg.stages = parsed(key, value)?,
        "sigma" => cfg.sigma = real(key, value)?,
        "lr_resolution" => cfg.lr_resolution = value.parse()?,
        "variant" => cfg.variant = value.parse()?,
        "width_divisor" => cfg.width_divisor = parsed(key, value)?,
        other => {
            return Err(Error::config(format!(
                "unknown key `{other}` (known: {})",
                KEYS.join(", ")
            )))
        }
    }
    Ok(())
}

/// Parses a config file on top of the defaults, then validates the result.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    apply_config(&mut cfg, text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies `key = value` lines to an existing config without validating.
pub fn apply_config(cfg: &mut TrainConfig, text: &str) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
        set_config_value(cfg, key, value).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("line {}: {m}", i + 1)),
            other => other,
        })?;
    }
    Ok(())
}

pub fn format_config(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    let rows: [(&str, String); 13] = [
        ("learning_rate", cfg.learning_rate.to_string()),
        ("momentum", cfg.momentum.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("lambda_l", cfg.lambda_l.to_string()),
        ("lambda_h", cfg.lambda_h.to_string()),
        ("crop_fraction", cfg.crop_fraction.to_string()),
        ("iterations", cfg.iterations.to_string()),
        ("seed", cfg.seed.to_string()),
        ("stages", cfg.stages.to_string()),
        ("sigma", cfg.sigma.to_string()),
        ("lr_resolution", cfg.lr_resolution.to_string()),
        ("variant", cfg.variant.to_string()),
        ("width_divisor", cfg.width_divisor.to_string()),
    ];
    for (k, v) in rows {
        writeln!(out, "{k} = {v}").unwrap();
    }
    out
}
