//! Run manifests: the resolved settings of a command plus content hashes of
//! its inputs and outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lvqa_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub settings: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// SHA-256 of a file, or of the sorted `relative-path hash` listing of a
/// directory tree.
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        return file_hash(path);
    }
    let mut listing = String::new();
    let mut entries: Vec<PathBuf> = Vec::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if entry.file_type().is_file() && entry.file_name() != MANIFEST_FILE {
            entries.push(entry.into_path());
        }
    }
    for p in entries {
        let rel = p.strip_prefix(path).unwrap_or(&p);
        listing.push_str(&format!("{} {}\n", rel.display(), file_hash(&p)?));
    }
    Ok(hex::encode(Sha256::digest(listing.as_bytes())))
}

impl Manifest {
    pub fn new(command: &str, settings: impl Serialize) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            settings: serde_json::to_value(settings).expect("settings serialize"),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(label.to_string(), content_hash(path)?);
        Ok(())
    }

    pub fn output(&mut self, label: &str, path: &Path) -> Result<()> {
        self.outputs.insert(label.to_string(), content_hash(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}
