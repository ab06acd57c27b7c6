use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Record of one command run, written once per output directory. Reruns
/// overwrite it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<PathBuf>,
    pub timings_s: BTreeMap<String, f64>,
    pub metrics: Value,
}

impl RunManifest {
    pub fn new(command: &str, config_digest: String, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_digest,
            seed,
            threads: rayon::current_num_threads(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings_s: BTreeMap::new(),
            metrics: Value::Null,
        }
    }

    /// Runs `f` and records its wall-clock time under `phase`.
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.timings_s.entry(phase.into()).or_default() += start.elapsed().as_secs_f64();
        out
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.into());
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join(MANIFEST_NAME), text + "\n")
    }
}
