//! Line-oriented `key = value` configuration files.

use std::path::Path;

use crate::autoencoder::ModelConfig;
use crate::data::SynthConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

/// `(line, key, value)` triples; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str, origin: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(origin, i + 1, format!("expected `key = value`, found `{line}`")))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text, path)
}

fn value<T: std::str::FromStr>(origin: &Path, line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::parse(origin, line, format!("bad value `{v}` for `{key}`")))
}

/// Model and training settings from one file. Returns the config seed, if
/// the file sets one.
pub fn train_settings(
    entries: &[(usize, String, String)],
    origin: &Path,
) -> Result<(ModelConfig, TrainConfig, Option<u64>)> {
    let mut m = ModelConfig::default();
    let mut t = TrainConfig::default();
    let mut seed = None;
    for (line, k, v) in entries {
        let line = *line;
        match k.as_str() {
            "window_len" => m.window_len = value(origin, line, k, v)?,
            "hidden" => m.hidden = value(origin, line, k, v)?,
            "latent" => m.latent = value(origin, line, k, v)?,
            "time_dim" => m.time_dim = value(origin, line, k, v)?,
            "mask_dim" => m.mask_dim = value(origin, line, k, v)?,
            "alpha" => m.alpha = value(origin, line, k, v)?,
            "k_max" => m.k_max = value(origin, line, k, v)?,
            "latent_iters" => m.latent_iters = value(origin, line, k, v)?,
            "train_latent_iters" => m.train_latent_iters = value(origin, line, k, v)?,
            "mask_ratio" => t.mask_ratio = value(origin, line, k, v)?,
            "learning_rate" => t.learning_rate = value(origin, line, k, v)?,
            "beta1" => t.beta1 = value(origin, line, k, v)?,
            "beta2" => t.beta2 = value(origin, line, k, v)?,
            "eps" => t.eps = value(origin, line, k, v)?,
            "max_epochs" => t.max_epochs = value(origin, line, k, v)?,
            "patience" => t.patience = value(origin, line, k, v)?,
            "split_ratio" => t.split_ratio = value(origin, line, k, v)?,
            "stride" => t.stride = value(origin, line, k, v)?,
            "loss_scope" => t.loss_scope = value(origin, line, k, v)?,
            "seed" => seed = Some(value(origin, line, k, v)?),
            other => return Err(Error::parse(origin, line, format!("unknown key `{other}`"))),
        }
    }
    Ok((m, t, seed))
}

pub fn synth_settings(entries: &[(usize, String, String)], origin: &Path) -> Result<(SynthConfig, Option<u64>)> {
    let mut c = SynthConfig::default();
    let mut seed = None;
    for (line, k, v) in entries {
        let line = *line;
        match k.as_str() {
            "n_nodes" => c.n_nodes = value(origin, line, k, v)?,
            "segment_len_m" => c.segment_len_m = value(origin, line, k, v)?,
            "days" => c.days = value(origin, line, k, v)?,
            "free_flow_mph" => c.free_flow_mph = value(origin, line, k, v)?,
            "congestion_wave_mph" => c.congestion_wave_mph = value(origin, line, k, v)?,
            "recovery_wave_mph" => c.recovery_wave_mph = value(origin, line, k, v)?,
            "n_waves_per_day" => c.n_waves_per_day = value(origin, line, k, v)?,
            "noise_std_mph" => c.noise_std_mph = value(origin, line, k, v)?,
            "daily_dip_frac" => c.daily_dip_frac = value(origin, line, k, v)?,
            "missing_rate" => c.missing_rate = value(origin, line, k, v)?,
            "route_hops" => c.route_hops = value(origin, line, k, v)?,
            "seed" => seed = Some(value(origin, line, k, v)?),
            other => return Err(Error::parse(origin, line, format!("unknown key `{other}`"))),
        }
    }
    Ok((c, seed))
}

pub fn model_entries(m: &ModelConfig) -> Vec<(String, String)> {
    [
        ("window_len", m.window_len.to_string()),
        ("hidden", m.hidden.to_string()),
        ("latent", m.latent.to_string()),
        ("time_dim", m.time_dim.to_string()),
        ("mask_dim", m.mask_dim.to_string()),
        ("alpha", m.alpha.to_string()),
        ("k_max", m.k_max.to_string()),
        ("latent_iters", m.latent_iters.to_string()),
        ("train_latent_iters", m.train_latent_iters.to_string()),
        ("norm_mean", m.norm.mean.to_string()),
        ("norm_std", m.norm.std.to_string()),
        ("relu_placement", "after_residual".to_string()),
        ("decoder_conditioning", "none".to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (format!("model.{k}"), v))
    .collect()
}

pub fn train_entries(t: &TrainConfig) -> Vec<(String, String)> {
    [
        ("mask_ratio", t.mask_ratio.to_string()),
        ("learning_rate", t.learning_rate.to_string()),
        ("beta1", t.beta1.to_string()),
        ("beta2", t.beta2.to_string()),
        ("eps", t.eps.to_string()),
        ("max_epochs", t.max_epochs.to_string()),
        ("patience", t.patience.to_string()),
        ("split_ratio", t.split_ratio.to_string()),
        ("stride", t.stride.to_string()),
        ("loss_scope", t.loss_scope.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (format!("train.{k}"), v))
    .collect()
}

pub fn synth_entries(c: &SynthConfig) -> Vec<(String, String)> {
    [
        ("n_nodes", c.n_nodes.to_string()),
        ("segment_len_m", c.segment_len_m.to_string()),
        ("days", c.days.to_string()),
        ("free_flow_mph", c.free_flow_mph.to_string()),
        ("congestion_wave_mph", c.congestion_wave_mph.to_string()),
        ("recovery_wave_mph", c.recovery_wave_mph.to_string()),
        ("n_waves_per_day", c.n_waves_per_day.to_string()),
        ("noise_std_mph", c.noise_std_mph.to_string()),
        ("daily_dip_frac", c.daily_dip_frac.to_string()),
        ("missing_rate", c.missing_rate.to_string()),
        ("route_hops", c.route_hops.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (format!("synth.{k}"), v))
    .collect()
}
