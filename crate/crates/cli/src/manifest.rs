//! Run manifest: one entry per pipeline stage recording the config hash,
//! the seeds in effect, and the files the stage wrote. Reruns with the same
//! inputs rewrite the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StageEntry {
    pub config_sha256: String,
    pub master_seed: u64,
    pub stage_seed: u64,
    /// Attack filter in effect, if any.
    pub attack_filter: Option<String>,
    /// Paths relative to the output directory, sorted.
    pub outputs: Vec<String>,
}

pub fn record_stage(
    out_dir: &Path,
    stage: &str,
    entry: StageEntry,
) -> Result<(), CliError> {
    let path = out_dir.join(MANIFEST_FILE);
    let mut manifest: Manifest = if path.exists() {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Pipeline(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Pipeline(format!("{}: {e}", path.display())))?
    } else {
        Manifest::default()
    };
    let mut entry = entry;
    entry.outputs.sort();
    manifest.stages.insert(stage.to_string(), entry);
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text)
        .map_err(|e| CliError::Pipeline(format!("{}: {e}", path.display())))?;
    Ok(())
}
