use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// What a command did: enough to rerun it with the same binary.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: &'static str,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub wall_clock_s: f64,
}

pub struct Recorder {
    command: String,
    started: Instant,
    started_unix: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    pub fn finish(mut self, config: Value, seed: Option<u64>, path: &Path) -> Result<(), CliError> {
        self.outputs.push(path.to_path_buf());
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config,
            seed,
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix: self.started_unix,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        crate::commands::write_json(path, &manifest)
    }
}
