//! On-disk artifacts. Models, feature banks, and detectors are versioned
//! JSON documents whose tensors carry base64 little-endian float payloads,
//! so save/load round-trips are bit-exact. Attack batches are JSON lines.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::artifact::ClassFeatureBank;
use crate::attack::AttackResult;
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::nn::NetworkModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format_version: u32,
    kind: String,
    payload: T,
}

fn save_envelope<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let envelope = Envelope {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        payload,
    };
    let mut text = serde_json::to_string_pretty(&envelope)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_envelope<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let envelope: Envelope<T> = serde_json::from_str(&text)?;
    if envelope.format_version != FORMAT_VERSION {
        return Err(Error::Persist(format!(
            "{}: format version {} unsupported (expected {FORMAT_VERSION})",
            path.display(),
            envelope.format_version
        )));
    }
    if envelope.kind != kind {
        return Err(Error::Persist(format!(
            "{}: artifact kind {:?}, expected {kind:?}",
            path.display(),
            envelope.kind
        )));
    }
    Ok(envelope.payload)
}

pub fn save_model(path: &Path, model: &NetworkModel) -> Result<()> {
    save_envelope(path, "model", model)
}

pub fn load_model(path: &Path) -> Result<NetworkModel> {
    load_envelope(path, "model")
}

pub fn save_feature_bank(path: &Path, bank: &ClassFeatureBank) -> Result<()> {
    save_envelope(path, "feature-bank", bank)
}

pub fn load_feature_bank(path: &Path) -> Result<ClassFeatureBank> {
    load_envelope(path, "feature-bank")
}

pub fn save_detector(path: &Path, detector: &DetectorModel) -> Result<()> {
    save_envelope(path, "detector", detector)
}

pub fn load_detector(path: &Path) -> Result<DetectorModel> {
    load_envelope(path, "detector")
}

/// One AttackResult per line.
pub fn save_attack_batch(path: &Path, results: &[AttackResult]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    for result in results {
        serde_json::to_writer(&mut out, result)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_attack_batch(path: &Path) -> Result<Vec<AttackResult>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut results = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let result: AttackResult = serde_json::from_str(&line)
            .map_err(|e| Error::Persist(format!("{} line {}: {e}", path.display(), idx + 1)))?;
        results.push(result);
    }
    Ok(results)
}

/// Pretty-printed JSON for reports and manifests.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
