//! Flat key=value configuration documents with dotted keys.
//!
//! Unknown keys are rejected by name; flags override file values at the
//! CLI layer. The same model/stft section is embedded in checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::D2FormerConfig;
use crate::training::{LossWeights, TrainSettings};

/// How the dataset directory is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    /// Paired when `noisy/` exists, else synthetic.
    Auto,
    Paired,
    Synthetic,
}

/// Everything the CLI can configure from one document.
#[derive(Debug, Clone)]
pub struct FullConfig {
    pub model: D2FormerConfig,
    pub loss: LossWeights,
    pub train: TrainSettings,
    pub data_mode: DataMode,
    pub snr_grid: Vec<f64>,
}

impl Default for FullConfig {
    fn default() -> Self {
        Self {
            model: D2FormerConfig::full(),
            loss: LossWeights::paper(),
            train: TrainSettings::default(),
            data_mode: DataMode::Auto,
            snr_grid: vec![0.0, 5.0, 10.0, 15.0],
        }
    }
}

/// The desk-scale preset (C=4, N=1, higher lr for short runs).
pub fn toy_config() -> FullConfig {
    FullConfig {
        model: D2FormerConfig::toy(),
        train: TrainSettings { lr: 2e-3, ..TrainSettings::default() },
        ..FullConfig::default()
    }
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value, got '{raw}'", lineno + 1)));
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn p_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("key '{key}': '{v}' is not an unsigned integer")))
}

fn p_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("key '{key}': '{v}' is not a number")))
}

fn p_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| p_usize(key, s.trim())).collect()
}

fn p_f64_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| p_f64(key, s.trim())).collect()
}

fn p_pair(key: &str, v: &str) -> Result<(usize, usize)> {
    let parts = p_usize_list(key, v)?;
    if parts.len() != 2 {
        return Err(Error::Config(format!("key '{key}': expected two comma-separated integers")));
    }
    Ok((parts[0], parts[1]))
}

/// Apply one `model.*` / `stft.*` assignment; false when the key is not
/// part of the model section.
fn apply_model_key(cfg: &mut D2FormerConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "model.channels" => cfg.channels = p_usize(key, v)?,
        "model.blocks" => cfg.blocks = p_usize(key, v)?,
        "model.heads" => cfg.heads = p_usize(key, v)?,
        "model.dilations" => cfg.dilations = p_usize_list(key, v)?,
        "model.kernel_enc" => cfg.kernel_enc = p_pair(key, v)?,
        "model.kernel_dp" => cfg.kernel_dp = p_pair(key, v)?,
        "model.kernel_up" => cfg.kernel_up = p_pair(key, v)?,
        "model.conv_kernel" => cfg.conv_kernel = p_usize(key, v)?,
        "model.ffn_mult" => cfg.ffn_mult = p_usize(key, v)?,
        "model.cfsmn_before" => cfg.cfsmn_l.0 = p_usize(key, v)?,
        "model.cfsmn_after" => cfg.cfsmn_l.1 = p_usize(key, v)?,
        "model.alpha" => cfg.alpha = p_f64(key, v)?,
        "model.beta" => cfg.beta = p_f64(key, v)?,
        "stft.window_len" => cfg.window_len = p_usize(key, v)?,
        "stft.hop" => cfg.hop = p_usize(key, v)?,
        "stft.fft_size" => cfg.fft_size = p_usize(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Serialize the model/stft section (the part checkpoints embed).
pub fn model_section_text(cfg: &D2FormerConfig) -> String {
    let mut s = String::new();
    let list = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
    let _ = writeln!(s, "model.channels = {}", cfg.channels);
    let _ = writeln!(s, "model.blocks = {}", cfg.blocks);
    let _ = writeln!(s, "model.heads = {}", cfg.heads);
    let _ = writeln!(s, "model.dilations = {}", list(&cfg.dilations));
    let _ = writeln!(s, "model.kernel_enc = {},{}", cfg.kernel_enc.0, cfg.kernel_enc.1);
    let _ = writeln!(s, "model.kernel_dp = {},{}", cfg.kernel_dp.0, cfg.kernel_dp.1);
    let _ = writeln!(s, "model.kernel_up = {},{}", cfg.kernel_up.0, cfg.kernel_up.1);
    let _ = writeln!(s, "model.conv_kernel = {}", cfg.conv_kernel);
    let _ = writeln!(s, "model.ffn_mult = {}", cfg.ffn_mult);
    let _ = writeln!(s, "model.cfsmn_before = {}", cfg.cfsmn_l.0);
    let _ = writeln!(s, "model.cfsmn_after = {}", cfg.cfsmn_l.1);
    let _ = writeln!(s, "model.alpha = {}", cfg.alpha);
    let _ = writeln!(s, "model.beta = {}", cfg.beta);
    let _ = writeln!(s, "stft.window_len = {}", cfg.window_len);
    let _ = writeln!(s, "stft.hop = {}", cfg.hop);
    let _ = writeln!(s, "stft.fft_size = {}", cfg.fft_size);
    s
}

/// Parse a model/stft section starting from the full-config defaults; every
/// key must belong to the section.
pub fn model_section_from_text(text: &str) -> Result<D2FormerConfig> {
    let mut cfg = D2FormerConfig::full();
    for (k, v) in parse_kv(text)? {
        if !apply_model_key(&mut cfg, &k, &v)? {
            return Err(Error::Config(format!("unknown key '{k}' in model section")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parse a full configuration document over the defaults, rejecting
/// unknown keys by name.
pub fn full_config_from_text(text: &str) -> Result<FullConfig> {
    let mut cfg = FullConfig::default();
    apply_overrides(&mut cfg, &parse_kv(text)?)?;
    Ok(cfg)
}

/// Apply parsed key=value overrides (file or CLI flags).
pub fn apply_overrides(cfg: &mut FullConfig, kv: &BTreeMap<String, String>) -> Result<()> {
    for (k, v) in kv {
        if apply_model_key(&mut cfg.model, k, v)? {
            continue;
        }
        match k.as_str() {
            "loss.gamma1" => cfg.loss.gamma1 = p_f64(k, v)?,
            "loss.gamma2" => cfg.loss.gamma2 = p_f64(k, v)?,
            "loss.gamma3" => cfg.loss.gamma3 = p_f64(k, v)?,
            "loss.p" => cfg.loss.p = p_f64(k, v)?,
            "train.lr" => cfg.train.lr = p_f64(k, v)?,
            "train.batch" => cfg.train.batch = p_usize(k, v)?,
            "train.epochs" => cfg.train.epochs = p_usize(k, v)?,
            "train.hold_epochs" => cfg.train.hold_epochs = p_usize(k, v)?,
            "train.decay_factor" => cfg.train.decay_factor = p_f64(k, v)?,
            "train.patience" => cfg.train.patience = p_usize(k, v)?,
            "train.weight_decay" => cfg.train.weight_decay = p_f64(k, v)?,
            "train.clip_norm" => {
                let c = p_f64(k, v)?;
                cfg.train.clip_norm = (c > 0.0).then_some(c);
            }
            "data.segment_seconds" => cfg.train.segment_seconds = p_f64(k, v)?,
            "data.mode" => {
                cfg.data_mode = match v.as_str() {
                    "auto" => DataMode::Auto,
                    "paired" => DataMode::Paired,
                    "synthetic" => DataMode::Synthetic,
                    other => {
                        return Err(Error::Config(format!(
                            "key 'data.mode': '{other}' is not auto|paired|synthetic"
                        )))
                    }
                }
            }
            "data.snr_grid" => cfg.snr_grid = p_f64_list(k, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
    }
    cfg.model.validate()
}

/// Serialize a full configuration (stable key order).
pub fn full_config_text(cfg: &FullConfig) -> String {
    let mut s = model_section_text(&cfg.model);
    let _ = writeln!(s, "loss.gamma1 = {}", cfg.loss.gamma1);
    let _ = writeln!(s, "loss.gamma2 = {}", cfg.loss.gamma2);
    let _ = writeln!(s, "loss.gamma3 = {}", cfg.loss.gamma3);
    let _ = writeln!(s, "loss.p = {}", cfg.loss.p);
    let _ = writeln!(s, "train.lr = {}", cfg.train.lr);
    let _ = writeln!(s, "train.batch = {}", cfg.train.batch);
    let _ = writeln!(s, "train.epochs = {}", cfg.train.epochs);
    let _ = writeln!(s, "train.hold_epochs = {}", cfg.train.hold_epochs);
    let _ = writeln!(s, "train.decay_factor = {}", cfg.train.decay_factor);
    let _ = writeln!(s, "train.patience = {}", cfg.train.patience);
    let _ = writeln!(s, "train.weight_decay = {}", cfg.train.weight_decay);
    let _ = writeln!(s, "train.clip_norm = {}", cfg.train.clip_norm.unwrap_or(0.0));
    let _ = writeln!(s, "data.segment_seconds = {}", cfg.train.segment_seconds);
    let mode = match cfg.data_mode {
        DataMode::Auto => "auto",
        DataMode::Paired => "paired",
        DataMode::Synthetic => "synthetic",
    };
    let _ = writeln!(s, "data.mode = {mode}");
    let grid = cfg.snr_grid.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    let _ = writeln!(s, "data.snr_grid = {grid}");
    s
}
