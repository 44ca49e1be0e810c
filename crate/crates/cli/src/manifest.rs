use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Result;
use serde::Serialize;
use serde_json::Value;

/// Record of one CLI run, written next to its primary output as
/// `<output>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub tool_version: &'static str,
    pub config: Value,
    pub seeds: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

pub struct Run {
    subcommand: &'static str,
    started: SystemTime,
    clock: Instant,
}

impl Run {
    pub fn start(subcommand: &'static str) -> Self {
        Run { subcommand, started: SystemTime::now(), clock: Instant::now() }
    }

    pub fn finish(
        self,
        config: Value,
        seeds: Value,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Result<PathBuf> {
        let primary = outputs.first().expect("a run has at least one output");
        let path = manifest_path(primary);
        let manifest = RunManifest {
            subcommand: self.subcommand,
            tool_version: env!("CARGO_PKG_VERSION"),
            config,
            seeds,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            started_unix_secs: self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            wall_clock_secs: self.clock.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}
