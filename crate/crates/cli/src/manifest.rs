//! Record of a pipeline run: config hash, versions and checksummed outputs.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct OutputFile {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct Stage {
    pub name: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<OutputFile>,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub checkpoint_format_version: u16,
    pub stages: Vec<Stage>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        Self {
            config_hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format_version: tod_core::tensor::CHECKPOINT_VERSION,
            stages: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).expect("plain data serializes");
        fs::write(path, json + "\n").map_err(|e| CliError::io(path, e))
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Checksums `files`, recording paths relative to `root`, sorted.
pub fn checksum_outputs(root: &Path, files: &[PathBuf]) -> Result<Vec<OutputFile>, CliError> {
    let mut out = files
        .iter()
        .map(|p| {
            Ok(OutputFile {
                path: p.strip_prefix(root).unwrap_or(p).display().to_string(),
                sha256: file_sha256(p)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(
            file_sha256(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let outs = checksum_outputs(dir.path(), &[p]).unwrap();
        assert_eq!(outs[0].path, "a.txt");
    }
}
