use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{io_error, CliError};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// What produced an output directory, with enough to replay it.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tool_version: &'static str,
    pub inputs: BTreeMap<String, String>,
    pub output: String,
    pub started_at: String,
    pub finished_at: String,
}

/// Current time, or `SOURCE_DATE_EPOCH` when set so replays are
/// byte-identical.
pub fn timestamp() -> String {
    let t = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<u64>().ok())
        .map(|secs| UNIX_EPOCH + Duration::from_secs(secs))
        .unwrap_or_else(SystemTime::now);
    humantime::format_rfc3339_seconds(t).to_string()
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64, output: &Path) -> Self {
        Self {
            command: command.into(),
            config,
            seed,
            tool_version: env!("CARGO_PKG_VERSION"),
            inputs: BTreeMap::new(),
            output: output.display().to_string(),
            started_at: timestamp(),
            finished_at: String::new(),
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.into(), path.display().to_string());
        self
    }

    pub fn write(mut self, dir: &Path) -> Result<(), CliError> {
        self.finished_at = timestamp();
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))
    }
}
