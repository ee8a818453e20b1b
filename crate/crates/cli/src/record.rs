use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Ok,
    Diverged { detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub wall_clock_seconds: f64,
    /// File names relative to the run directory.
    pub artifacts: Vec<String>,
    pub outcome: RunOutcome,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid record {}: {e}", path.display())))
    }

    pub fn diverged(&self) -> bool {
        matches!(self.outcome, RunOutcome::Diverged { .. })
    }
}

pub(crate) fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Output directory of one run; remembers what it wrote.
pub struct RunDir {
    path: PathBuf,
    artifacts: Vec<String>,
}

impl RunDir {
    /// `<root>/<hash>/`, created if needed, with `config.json` written.
    pub fn create(root: &Path, cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let path = root.join(cfg.hash());
        std::fs::create_dir_all(&path).map_err(|e| io_error(&path, e))?;
        let mut dir = Self {
            path,
            artifacts: Vec::new(),
        };
        let value = serde_json::to_value(cfg).expect("config serializes");
        dir.write("config.json", &pretty(&value))?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, name: &str, content: &str) -> Result<(), CliError> {
        let file = self.path.join(name);
        if let Some(parent) = file.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        std::fs::write(&file, content).map_err(|e| io_error(&file, e))?;
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
        Ok(())
    }

    pub fn save_network(&mut self, name: &str, net: &selflearn::network::Network) -> Result<(), CliError> {
        let file = self.path.join(name);
        if let Some(parent) = file.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        net.save(&file)?;
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
        Ok(())
    }

    /// Writes `record.json` and returns the record.
    pub fn finish(
        mut self,
        command: &str,
        cfg: &ExperimentConfig,
        metrics: BTreeMap<String, f64>,
        wall_clock_seconds: f64,
        outcome: RunOutcome,
    ) -> Result<RunRecord, CliError> {
        let mut artifacts = self.artifacts.clone();
        artifacts.push("record.json".to_string());
        let record = RunRecord {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            metrics,
            wall_clock_seconds,
            artifacts,
            outcome,
        };
        let value = serde_json::to_value(&record).expect("record serializes");
        self.write("record.json", &pretty(&value))?;
        Ok(record)
    }
}

pub(crate) fn pretty(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

/// Recomputes the hash of `<dir>/config.json` and compares it with both the
/// directory name and the record.
pub fn verify_run_dir(dir: &Path) -> Result<bool, CliError> {
    let hash = crate::config::rehash_file(&dir.join("config.json"))?;
    let record = RunRecord::load(&dir.join("record.json"))?;
    let name_ok = dir.file_name().is_some_and(|n| n.to_string_lossy() == hash);
    Ok(name_ok && record.config_hash == hash)
}
