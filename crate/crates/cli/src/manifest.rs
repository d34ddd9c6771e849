use std::io::Write;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// One line of `runs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_sha256: String,
    pub started_at: String,
    pub finished_at: String,
    /// `ok` or the error message.
    pub status: String,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(
        command: &str,
        resolved_config: &str,
        started: DateTime<Utc>,
        status: String,
        outputs: Vec<String>,
    ) -> Self {
        let config_sha256 = sha256_hex(resolved_config.as_bytes());
        let run_id = format!("{}-{}", started.format("%Y%m%dT%H%M%S%.3fZ"), &config_sha256[..8]);
        Self {
            run_id,
            command: command.to_string(),
            config_sha256,
            started_at: stamp(started),
            finished_at: stamp(Utc::now()),
            status,
            outputs,
        }
    }

    pub fn append(&self, out_dir: &Path) -> Result<(), CliError> {
        let path = out_dir.join("runs.jsonl");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::io(&path, e))?;
        let line = serde_json::to_string(self).expect("manifest serialises");
        writeln!(f, "{line}").map_err(|e| CliError::io(&path, e))
    }
}
