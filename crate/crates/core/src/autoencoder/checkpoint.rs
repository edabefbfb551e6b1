//! `DGAE1` checkpoint files.
//!
//! Layout: the line `DGAE1`, then `key = value` config lines, then one
//! `array <name> <rows> <cols> f32` line per parameter array, then `end`,
//! followed by every array's elements as little-endian `f32` in manifest
//! order (row-major). No graph is stored.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::params::{ModelConfig, ModelParams, NormStats, ARRAY_NAMES};
use crate::{Error, Result};

pub const FORMAT_VERSION: &str = "DGAE1";

fn ck(array: &str, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        array: array.to_string(),
        msg: msg.into(),
    }
}

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut header = format!("{FORMAT_VERSION}\n");
    for (k, v) in [
        ("window_len", c.window_len.to_string()),
        ("hidden", c.hidden.to_string()),
        ("latent", c.latent.to_string()),
        ("time_dim", c.time_dim.to_string()),
        ("mask_dim", c.mask_dim.to_string()),
        ("alpha", c.alpha.to_string()),
        ("k_max", c.k_max.to_string()),
        ("latent_iters", c.latent_iters.to_string()),
        ("train_latent_iters", c.train_latent_iters.to_string()),
        ("norm_mean", c.norm.mean.to_string()),
        ("norm_std", c.norm.std.to_string()),
    ] {
        header.push_str(&format!("{k} = {v}\n"));
    }
    for (name, a) in params.arrays() {
        header.push_str(&format!("array {name} {} {} f32\n", a.nrows(), a.ncols()));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    for (_, a) in params.arrays() {
        for &v in a.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<String> {
        let rest = &bytes[*pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ck("header", "truncated header"))?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| ck("header", "header is not UTF-8"))?;
        *pos += end + 1;
        Ok(line.to_string())
    };

    let magic = next_line(&mut pos)?;
    if magic != FORMAT_VERSION {
        return Err(ck("header", format!("unknown format version `{magic}`")));
    }
    let mut config = ModelConfig::default();
    let mut mean = None;
    let mut std = None;
    let mut manifest = Vec::new();
    loop {
        let line = next_line(&mut pos)?;
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("array ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 4 || f[3] != "f32" {
                return Err(ck("header", format!("bad manifest line `{line}`")));
            }
            let dims = (f[1].parse::<usize>(), f[2].parse::<usize>());
            let (Ok(r), Ok(c)) = dims else {
                return Err(ck(f[0], "bad dimensions"));
            };
            manifest.push((f[0].to_string(), (r, c)));
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| ck("header", format!("bad config line `{line}`")))?;
        let int = || v.parse::<usize>().map_err(|_| ck("header", format!("bad value for {k}")));
        let float = || v.parse::<f64>().map_err(|_| ck("header", format!("bad value for {k}")));
        match k {
            "window_len" => config.window_len = int()?,
            "hidden" => config.hidden = int()?,
            "latent" => config.latent = int()?,
            "time_dim" => config.time_dim = int()?,
            "mask_dim" => config.mask_dim = int()?,
            "alpha" => config.alpha = float()?,
            "k_max" => config.k_max = int()?,
            "latent_iters" => config.latent_iters = int()?,
            "train_latent_iters" => config.train_latent_iters = int()?,
            "norm_mean" => mean = Some(float()?),
            "norm_std" => std = Some(float()?),
            other => return Err(ck("header", format!("unknown config key `{other}`"))),
        }
    }
    let (Some(mean), Some(std)) = (mean, std) else {
        return Err(ck("header", "missing normalisation statistics"));
    };
    config.norm = NormStats { mean, std };
    config.validate().map_err(|e| ck("header", e.to_string()))?;

    let expected = ModelParams::expected_shapes(&config);
    if manifest.len() != expected.len() {
        return Err(ck("header", format!("expected {} arrays, manifest lists {}", expected.len(), manifest.len())));
    }
    let mut params = ModelParams::zeros(config);
    for (((name, dims), (want_name, want_dims)), (_, slot)) in
        manifest.iter().zip(expected).zip(params.arrays_mut())
    {
        if name != want_name {
            return Err(ck(name, format!("expected array `{want_name}` at this position")));
        }
        if *dims != want_dims {
            return Err(ck(name, format!("shape {dims:?} does not match config {want_dims:?}")));
        }
        let len = dims.0 * dims.1;
        let raw = bytes
            .get(pos..pos + 4 * len)
            .ok_or_else(|| ck(name, "data truncated"))?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(ck(name, "non-finite values"));
        }
        *slot = Array2::from_shape_vec(*dims, vals).expect("length checked");
        pos += 4 * len;
    }
    if pos != bytes.len() {
        return Err(ck(ARRAY_NAMES[ARRAY_NAMES.len() - 1], "trailing bytes after the last array"));
    }
    Ok(params)
}

/// Writes through a temporary file and renames, so readers never see a
/// partial checkpoint.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
