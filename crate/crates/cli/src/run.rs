//! Output bookkeeping for one command: files written, inputs read, headline
//! numbers, and the manifest that ties them together.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub wall_time_s: f64,
    pub workers: usize,
    pub inputs: Vec<InputDigest>,
    /// Paths relative to the output directory, or absolute for cache files.
    pub outputs: Vec<String>,
    pub headline: Map<String, Value>,
    pub config: RunConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn manifest_name(command: &str) -> String {
    format!("{command}.manifest.json")
}

pub struct Run {
    pub command: String,
    pub out: PathBuf,
    pub cache_dir: PathBuf,
    pub config: RunConfig,
    pub config_hash: String,
    pub workers: usize,
    started: Instant,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    headline: Map<String, Value>,
}

impl Run {
    pub fn new(command: &str, out: PathBuf, cache_dir: PathBuf, config: RunConfig, config_hash: String, workers: usize) -> Self {
        Self {
            command: command.to_string(),
            out,
            cache_dir,
            config,
            config_hash,
            workers,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            headline: Map::new(),
        }
    }

    /// Writes `contents` to `name` inside the output directory.
    pub fn write(&mut self, name: &str, contents: &str) -> anyhow::Result<()> {
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(name, &text)
    }

    /// Records a file that lives outside the output directory.
    pub fn external_output(&mut self, path: &Path) {
        let path = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        self.outputs.push(path.display().to_string());
    }

    pub fn read_input(&mut self, path: &Path) -> anyhow::Result<String> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(text.as_bytes()),
        });
        Ok(text)
    }

    pub fn headline(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.headline.insert(key.to_string(), v);
    }

    /// Writes the manifest through a temporary file and a rename.
    pub fn finish(self) -> anyhow::Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.config_hash,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            workers: self.workers,
            inputs: self.inputs,
            outputs: self.outputs,
            headline: self.headline,
            config: self.config,
        };
        let name = manifest_name(&self.command);
        let tmp = self.out.join(format!(".{name}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&manifest)? + "\n")?;
        fs::rename(&tmp, self.out.join(&name))?;
        Ok(manifest)
    }
}
