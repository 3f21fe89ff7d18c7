//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys are the field names of [`ExperimentConfig`], [`ModelDims`],
//! [`AdaptConfig`] and [`LossConfig`](crate::losses::LossConfig), all in one
//! flat namespace. Unknown or repeated keys are errors. Lists
//! (`conv_channels`) are comma separated; domain specs are inline JSON.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Result, SfdaError};
use crate::experiment::ExperimentConfig;

pub const KEYS: &[&str] = &[
    "split_mode",
    "classes",
    "train_per_domain",
    "eval_per_domain",
    "image_side",
    "source_domain",
    "target_domain",
    "method",
    "dataset",
    "output_dir",
    "conv_channels",
    "num_layers",
    "num_heads",
    "embed_dim",
    "mlp_hidden",
    "positional_embedding",
    "bottleneck_dim",
    "lr_backbone_transformer",
    "lr_bottleneck_classifier",
    "momentum",
    "weight_decay",
    "batch_size",
    "source_epochs",
    "target_epochs",
    "ema_momentum",
    "tau",
    "seed",
    "smoothing",
    "alpha_sl",
    "beta_kd",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| SfdaError::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_json<T: serde::de::DeserializeOwned>(key: &str, value: &str) -> Result<T> {
    serde_json::from_str(value).map_err(|e| SfdaError::Config(format!("{key}: {e}")))
}

/// Applies one assignment to `cfg`.
pub fn set(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    let (m, a) = (&mut cfg.model, &mut cfg.adapt);
    match key {
        "split_mode" => cfg.split_mode = parse(key, value)?,
        "classes" => cfg.classes = parse(key, value)?,
        "train_per_domain" => cfg.train_per_domain = parse(key, value)?,
        "eval_per_domain" => cfg.eval_per_domain = parse(key, value)?,
        "image_side" => cfg.image_side = parse(key, value)?,
        "source_domain" => cfg.source_domain = parse_json(key, value)?,
        "target_domain" => cfg.target_domain = parse_json(key, value)?,
        "method" => cfg.method = parse(key, value)?,
        "dataset" => cfg.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
        "output_dir" => cfg.output_dir = PathBuf::from(value),
        "conv_channels" => m.conv_channels = parse_list(key, value)?,
        "num_layers" => m.num_layers = parse(key, value)?,
        "num_heads" => m.num_heads = parse(key, value)?,
        "embed_dim" => m.embed_dim = parse(key, value)?,
        "mlp_hidden" => m.mlp_hidden = parse(key, value)?,
        "positional_embedding" => m.positional_embedding = parse(key, value)?,
        "bottleneck_dim" => m.bottleneck_dim = parse(key, value)?,
        "lr_backbone_transformer" => a.lr_backbone_transformer = parse(key, value)?,
        "lr_bottleneck_classifier" => a.lr_bottleneck_classifier = parse(key, value)?,
        "momentum" => a.momentum = parse(key, value)?,
        "weight_decay" => a.weight_decay = parse(key, value)?,
        "batch_size" => a.batch_size = parse(key, value)?,
        "source_epochs" => a.source_epochs = parse(key, value)?,
        "target_epochs" => a.target_epochs = parse(key, value)?,
        "ema_momentum" => a.ema_momentum = parse(key, value)?,
        "tau" => a.tau = parse(key, value)?,
        "seed" => a.seed = parse(key, value)?,
        "smoothing" => a.loss.smoothing = parse(key, value)?,
        "alpha_sl" => a.loss.alpha_sl = parse(key, value)?,
        "beta_kd" => a.loss.beta_kd = parse(key, value)?,
        _ => return Err(SfdaError::Config(format!("unknown config key `{key}`"))),
    }
    Ok(())
}

/// Parses config text on top of the defaults and validates the result.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| SfdaError::Config(format!("line {}: expected key = value", n + 1)))?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(SfdaError::Config(format!("line {}: `{key}` given twice", n + 1)));
        }
        set(&mut cfg, key, value.trim()).map_err(|e| match e {
            SfdaError::Config(m) => SfdaError::Config(format!("line {}: {m}", n + 1)),
            other => other,
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SfdaError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Renders every key; `parse_config(&render(c))` reproduces `c`.
pub fn render(cfg: &ExperimentConfig) -> String {
    let (m, a) = (&cfg.model, &cfg.adapt);
    // `#` only occurs inside JSON strings, where the escape keeps it from reading as a comment
    let json = |v: &crate::data::DomainSpec| {
        serde_json::to_string(v)
            .expect("domain specs serialize")
            .replace('#', "\\u0023")
    };
    let channels: Vec<String> = m.conv_channels.iter().map(|c| c.to_string()).collect();
    let values: Vec<String> = vec![
        cfg.split_mode.to_string(),
        cfg.classes.to_string(),
        cfg.train_per_domain.to_string(),
        cfg.eval_per_domain.to_string(),
        cfg.image_side.to_string(),
        json(&cfg.source_domain),
        json(&cfg.target_domain),
        cfg.method.to_string(),
        cfg.dataset
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default(),
        cfg.output_dir.display().to_string(),
        channels.join(","),
        m.num_layers.to_string(),
        m.num_heads.to_string(),
        m.embed_dim.to_string(),
        m.mlp_hidden.to_string(),
        m.positional_embedding.to_string(),
        m.bottleneck_dim.to_string(),
        a.lr_backbone_transformer.to_string(),
        a.lr_bottleneck_classifier.to_string(),
        a.momentum.to_string(),
        a.weight_decay.to_string(),
        a.batch_size.to_string(),
        a.source_epochs.to_string(),
        a.target_epochs.to_string(),
        a.ema_momentum.to_string(),
        a.tau.to_string(),
        a.seed.to_string(),
        a.loss.smoothing.to_string(),
        a.loss.alpha_sl.to_string(),
        a.loss.beta_kd.to_string(),
    ];
    KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
}
