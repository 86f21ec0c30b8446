use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use umyops::Result;

pub const RUN_MANIFEST_SCHEMA: &str = "umyops-run/1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance of one command invocation, written once per output directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub wall_clock_s: f64,
    /// Command-specific payload.
    pub details: serde_json::Value,
}

pub struct Recorder {
    command: String,
    config_sha256: String,
    seed: u64,
    inputs: Vec<String>,
    started: Instant,
}

impl Recorder {
    pub fn start(command: &str, config: &impl Serialize, seed: u64, inputs: &[&Path]) -> Result<Self> {
        let bytes = serde_json::to_vec(config)?;
        Ok(Self {
            command: command.into(),
            config_sha256: hex::encode(Sha256::digest(&bytes)),
            seed,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            started: Instant::now(),
        })
    }

    pub fn finish(self, out: &Path, outputs: &[PathBuf], details: serde_json::Value) -> Result<RunManifest> {
        let manifest = RunManifest {
            schema: RUN_MANIFEST_SCHEMA.into(),
            command: self.command,
            config_sha256: self.config_sha256,
            seed: self.seed,
            inputs: self.inputs,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            details,
        };
        fs::create_dir_all(out)?;
        fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}
