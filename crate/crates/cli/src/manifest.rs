//! Run manifests: the resolved config plus hashes of everything read and written.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileRecord {
    pub fn of(dir: &Path, name: &str) -> std::io::Result<Self> {
        let data = std::fs::read(dir.join(name))?;
        Ok(Self {
            path: name.into(),
            sha256: sha256_hex(&data),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub version: String,
    pub core_version: String,
    pub config: RunConfig,
    pub threads: usize,
    pub rng_seed: u64,
    pub output_dir: PathBuf,
    /// Directory the inputs were read from, for subcommands that consume artifacts.
    pub input_dir: Option<PathBuf>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub wall_time_s: f64,
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_name(subcommand: &str) -> String {
    format!("manifest-{subcommand}.json")
}
