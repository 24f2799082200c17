//! Run manifests and metric summaries.
//!
//! Every run directory carries:
//!   - the command's data files (CSV, checkpoints),
//!   - `summary.json`: a flat, sorted name → number map that `compare`
//!     aligns across runs,
//!   - `manifest.json`: schema version, command, resolved config echo, seeds,
//!     content hash and size of every emitted file, and wall time.
//!
//! With fixed seeds the data files and `summary.json` are byte-identical
//! across reruns; only the manifest's `wall_time_s` varies.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct OutputFile {
    /// Path relative to the run directory.
    pub path: String,
    /// SHA-256 of the file contents, lowercase hex.
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub outputs: Vec<OutputFile>,
    pub wall_time_s: f64,
}

pub fn sha256_hex(path: &Path) -> Result<String, CliError> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Hash and measure the named files (paths relative to `out_dir`).
pub fn collect_outputs(out_dir: &Path, names: &[String]) -> Result<Vec<OutputFile>, CliError> {
    names
        .iter()
        .map(|name| {
            let full = out_dir.join(name);
            Ok(OutputFile {
                path: name.clone(),
                sha256: sha256_hex(&full)?,
                bytes: std::fs::metadata(&full)?.len(),
            })
        })
        .collect()
}

fn write_pretty_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Write `summary.json` (sorted keys, hence byte-stable).
pub fn write_summary(
    out_dir: &Path,
    summary: &BTreeMap<String, f64>,
) -> Result<(), CliError> {
    write_pretty_json(&out_dir.join("summary.json"), summary)
}

/// Read a run directory's `summary.json`.
pub fn read_summary(dir: &Path) -> Result<BTreeMap<String, f64>, CliError> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        CliError::msg(
            "comparison",
            format!("{}: cannot read summary: {e}", path.display()),
        )
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Read a run directory's `manifest.json` as a raw value.
pub fn read_manifest(dir: &Path) -> Result<serde_json::Value, CliError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        CliError::msg(
            "comparison",
            format!("{}: cannot read manifest: {e}", path.display()),
        )
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Hash the named outputs and write `manifest.json`.
pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    config_echo: serde_json::Value,
    seeds: &[u64],
    output_names: &[String],
    wall_time_s: f64,
) -> Result<(), CliError> {
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        command: command.to_string(),
        config: config_echo,
        seeds: seeds.to_vec(),
        outputs: collect_outputs(out_dir, output_names)?,
        wall_time_s,
    };
    write_pretty_json(&out_dir.join("manifest.json"), &manifest)
}

/// Format a float for CSV cells and summary keys: shortest round-trip form.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}
