//! Run manifests: resolved configuration plus content hashes of every file
//! read and written. No timestamps or host details, so identical runs give
//! byte-identical manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: C,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digest(path: &Path, shown_relative_to: Option<&Path>) -> Result<FileDigest> {
    let shown = shown_relative_to
        .and_then(|base| path.strip_prefix(base).ok())
        .unwrap_or(path);
    Ok(FileDigest {
        path: shown.to_string_lossy().replace('\\', "/"),
        sha256: sha256_file(path)?,
    })
}

/// Write `manifest_path` describing a finished run. Output paths are stored
/// relative to the manifest's directory when they lie inside it.
pub fn write_manifest<C: Serialize>(
    manifest_path: &Path,
    command: &'static str,
    seed: u64,
    config: C,
    inputs: &[&Path],
    outputs: &[PathBuf],
) -> Result<()> {
    let base = manifest_path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut outputs = outputs
        .iter()
        .map(|p| digest(p, base))
        .collect::<Result<Vec<_>>>()?;
    outputs.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        tool: "freemcg",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config,
        inputs: inputs.iter().map(|p| digest(p, None)).collect::<Result<_>>()?,
        outputs,
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(manifest_path, text).with_context(|| format!("writing {}", manifest_path.display()))
}
