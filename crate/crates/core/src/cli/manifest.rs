use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::analysis::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    /// Latest invocation of each command.
    pub commands: BTreeMap<String, CommandEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandEntry {
    pub config_sha256: String,
    pub config: String,
    pub seeds: Vec<u64>,
    /// Paths relative to the run directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, ExperimentError> {
    let mut f = fs::File::open(path).map_err(|e| ExperimentError::Data(format!("{}: {e}", path.display())))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| ExperimentError::Data(format!("{}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn hash_files(root: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>, ExperimentError> {
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(f).to_string_lossy().replace('\\', "/");
        out.insert(rel, file_sha256(f)?);
    }
    Ok(out)
}

/// Reads the run manifest, replaces the entry for `command` and writes it back.
pub fn record_command(root: &Path, command: &str, entry: CommandEntry) -> Result<(), ExperimentError> {
    let path = root.join(MANIFEST_FILE);
    let mut m = match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map_err(|e| ExperimentError::Data(format!("{}: {e}", path.display())))?,
        Err(_) => Manifest::default(),
    };
    m.version = env!("CARGO_PKG_VERSION").to_string();
    m.commands.insert(command.to_string(), entry);
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    write_atomic(&path, text.as_bytes()).map_err(|e| ExperimentError::Data(e.to_string()))
}

pub fn read_manifest(root: &Path) -> Result<Manifest, ExperimentError> {
    let path = root.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| ExperimentError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| ExperimentError::Data(format!("{}: {e}", path.display())))
}
