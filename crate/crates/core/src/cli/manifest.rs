//! Run manifests: a `key = value` record of how every output was produced.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::autoencoder::write_atomic;
use crate::{Error, Result};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String]) -> Self {
        let mut m = RunManifest::default();
        m.push("command", command);
        m.push("version", env!("CARGO_PKG_VERSION"));
        m.push("args", serde_json::to_string(args).expect("strings serialise"));
        if let Ok(cwd) = std::env::current_dir() {
            m.push("cwd", cwd.display());
        }
        m
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl std::fmt::Display) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn extend(&mut self, entries: Vec<(String, String)>) {
        self.entries.extend(entries);
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.push(format!("input.{name}"), path.display());
        self.push(format!("input.{name}.sha256"), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: &Path) -> Result<()> {
        self.push(format!("output.{name}"), path.display());
        self.push(format!("output.{name}.sha256"), sha256_file(path)?);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {}\n", v.replace('\n', " ")))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = super::config::parse_kv(&text, path)?
            .into_iter()
            .map(|(_, k, v)| (k, v))
            .collect();
        Ok(RunManifest { entries })
    }

    /// Recorded argument vector, working directory, and input digests.
    pub fn replay_plan(&self) -> Result<(Vec<String>, Option<PathBuf>, Vec<(PathBuf, String)>)> {
        let args: Vec<String> = self
            .get("args")
            .and_then(|a| serde_json::from_str(a).ok())
            .ok_or_else(|| Error::invalid("manifest has no readable `args` entry"))?;
        let cwd = self.get("cwd").map(PathBuf::from);
        let inputs = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with("input.") && !k.ends_with(".sha256"))
            .filter_map(|(k, v)| self.get(&format!("{k}.sha256")).map(|d| (PathBuf::from(v), d.to_string())))
            .collect();
        Ok((args, cwd, inputs))
    }
}

/// Manifest location for an output file: `<out>.manifest`.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}
