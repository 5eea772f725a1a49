//! Per-stage output directories and their manifests.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use irdistill_core::io::{read_file, sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the output root, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

/// One subcommand's output directory. Files are written atomically and
/// recorded; the manifest is written last by [`Stage::finish`].
pub struct Stage {
    root: PathBuf,
    dir: PathBuf,
    manifest: Manifest,
}

impl Stage {
    pub fn new(root: &Path, rel_dir: &str, command: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            root: root.to_path_buf(),
            dir: root.join(rel_dir),
            manifest: Manifest {
                schema_version: SCHEMA_VERSION,
                command: command.to_string(),
                config_hash: config_hash.to_string(),
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry(&self, path: &Path, bytes: &[u8]) -> FileEntry {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        FileEntry {
            path: rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/"),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        }
    }

    /// Reads an input file and records its hash.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = read_file(path)
            .with_context(|| format!("missing input {}; run the producing command first", path.display()))?;
        let e = self.entry(path, &bytes);
        self.manifest.inputs.push(e);
        Ok(bytes)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        let e = self.entry(&path, bytes);
        self.manifest.outputs.push(e);
        Ok(())
    }

    /// Records a file some other routine already wrote into the stage.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = read_file(&path)?;
        let e = self.entry(&path, &bytes);
        self.manifest.outputs.push(e);
        Ok(())
    }

    pub fn finish(mut self) -> Result<Manifest> {
        self.manifest.inputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.manifest.inputs.dedup();
        self.manifest.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        write_atomic(&self.dir.join(MANIFEST), &bytes)?;
        Ok(self.manifest)
    }
}
