//! `run.json` records and input hashing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::Command;
use crate::{Error, Result};

pub const RECORD_FILE: &str = "run.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub command: String,
    /// The command line as typed.
    pub argv: Vec<String>,
    /// Parsed arguments with absolute paths; what `rerun` replays.
    pub args: Command,
    pub config: RunConfig,
    pub seed: u64,
    /// SHA-256 of every input file or directory, keyed by absolute path.
    pub inputs: BTreeMap<String, String>,
    pub wall_time_secs: f64,
    /// `"ok"` or the error message.
    pub status: String,
    pub version: String,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        crate::scene_io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::scene_io::write_json(path, self)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if p.file_name().is_some_and(|n| n != RECORD_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

fn file_digest(path: &Path) -> Result<[u8; 32]> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).into())
}

/// SHA-256 of a file, or for a directory of its sorted `relative path,
/// file hash` listing. Provenance records inside it are ignored since they
/// carry wall times.
pub fn hash_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return Ok(hex(&file_digest(path)?));
    }
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(path).expect("under root");
        let rel: Vec<String> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        h.update(rel.join("/").as_bytes());
        h.update([0]);
        h.update(file_digest(&f)?);
    }
    Ok(hex(&h.finalize()))
}

pub fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.to_string_lossy().into_owned(), hash_path(p)?)))
        .collect()
}
