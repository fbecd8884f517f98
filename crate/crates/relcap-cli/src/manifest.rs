//! Per-run provenance record, written before any output and finalized last.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};

use relcap::config::RunConfig;
use relcap::data::write_atomic;

/// What ran and with which fully resolved inputs. `facts` carries
/// command-specific outcomes such as the effective learning rate.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub build: String,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    pub facts: BTreeMap<String, serde_json::Value>,
}

fn now() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

impl RunManifest {
    pub fn begin(
        command: &str,
        argv: Vec<String>,
        seed: u64,
        config: &RunConfig,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Self {
        RunManifest {
            command: command.to_string(),
            argv,
            seed,
            config: config.clone(),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            build: env!("BUILD_GIT_DESCRIBE").to_string(),
            started: now(),
            finished: None,
            status: "running".into(),
            facts: BTreeMap::new(),
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)?;
        Ok(())
    }

    /// Stamp the end time and outcome, then rewrite in place.
    pub fn finish(&mut self, path: &Path, outcome: Result<(), &anyhow::Error>) -> anyhow::Result<()> {
        self.finished = Some(now());
        self.status = match outcome {
            Ok(()) => "ok".into(),
            Err(e) => format!("error: {e}"),
        };
        self.write(path)
    }
}
