//! Run manifests and hash-stamped outputs.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigRef {
    /// `<builtin>` when no file was given.
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub configs: Vec<ConfigRef>,
    /// Flag values as given on the command line or defaulted.
    pub flags: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub version: String,
    /// Not part of the hash, so a rerun elsewhere stamps the same hash.
    pub output_dir: Option<PathBuf>,
    pub argv: Vec<String>,
}

impl RunManifest {
    /// SHA-256 over the manifest without its output directory and argv.
    pub fn hash(&self) -> String {
        let mut m = self.clone();
        m.output_dir = None;
        m.argv.clear();
        let text = serde_json::to_string(&m).expect("manifest serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_text(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

/// Destination for a run's files: a directory, or stdout when none was given.
pub struct Output {
    dir: Option<PathBuf>,
    hash: String,
    version: String,
}

impl Output {
    pub fn new(manifest: &RunManifest) -> Result<Self> {
        if let Some(dir) = &manifest.output_dir {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("manifest.json");
            let text = serde_json::to_string_pretty(manifest)?;
            fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(Output {
            dir: manifest.output_dir.clone(),
            hash: manifest.hash(),
            version: manifest.version.clone(),
        })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn header(&self) -> String {
        format!("# tlsecho {} manifest sha256:{}\n", self.version, self.hash)
    }

    /// CSV with a comment header; `body` writes the table.
    pub fn csv(&self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
        let mut buf = self.header().into_bytes();
        body(&mut buf)?;
        self.emit(name, &buf)
    }

    /// JSON has no comments, so the hash goes in a `manifest_sha256` field.
    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        if let serde_json::Value::Object(map) = &mut v {
            map.insert("manifest_sha256".into(), self.hash.clone().into());
        }
        let mut text = serde_json::to_string_pretty(&v)?;
        text.push('\n');
        self.emit(name, text.as_bytes())
    }

    fn emit(&self, name: &str, bytes: &[u8]) -> Result<()> {
        match &self.dir {
            Some(dir) => {
                let path = dir.join(name);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
            }
            None => {
                let mut out = std::io::stdout().lock();
                if !name.ends_with(".json") {
                    writeln!(out, "# {name}")?;
                }
                out.write_all(bytes)?;
                Ok(())
            }
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }
}
