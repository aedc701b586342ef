use std::path::{Path, PathBuf};
use std::time::Instant;

use cherryq::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// A file read by a run, identified by content.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputRef {
    pub role: String,
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl InputRef {
    pub fn of_bytes(role: &str, path: &Path, data: &[u8]) -> Self {
        Self {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: hex(&Sha256::digest(data)),
            bytes: data.len() as u64,
        }
    }

    pub fn of_file(role: &str, path: &Path) -> Result<Self, Error> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::of_bytes(role, path, &data))
    }
}

/// Everything needed to reproduce a run.
///
/// The copy embedded into checkpoints leaves out artifact paths and the
/// wall clock so that identical runs write identical bytes; the
/// `manifest.json` next to the artifacts carries both.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub inputs: Vec<InputRef>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &RunConfig, seed: u64) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seed,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            wall_clock_seconds: None,
            started: Some(Instant::now()),
        }
    }

    pub fn input(&mut self, r: InputRef) {
        self.inputs.push(r);
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    /// The deterministic part, for embedding into checkpoints.
    pub fn embedded(&self) -> serde_json::Value {
        let mut m = self.clone();
        m.artifacts.clear();
        m.wall_clock_seconds = None;
        serde_json::to_value(&m).expect("manifest serializes")
    }

    /// Stamps the elapsed time and writes `dir/manifest.json`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf, Error> {
        self.wall_clock_seconds = self.started.map(|t| t.elapsed().as_secs_f64());
        let path = dir.join("manifest.json");
        write_json(&path, &self)?;
        Ok(path)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
