//! Output directories, run manifests and timing files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const RUNTIME: &str = "runtime.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Serialize)]
pub struct FileRecord {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Everything needed to reproduce or audit one command. Wall-clock timings
/// and the worker count live in `runtime.json` so the manifest itself is a
/// pure function of the inputs and configuration.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub dataset_digest: Option<String>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub timings: String,
    pub details: BTreeMap<String, Value>,
}

#[derive(Debug, Serialize)]
struct Runtime {
    command: String,
    workers: usize,
    total_secs: f64,
    stages: Vec<(String, f64)>,
}

/// An append-only output directory: a directory that already holds files is
/// refused unless `force` is set.
pub struct OutputDir {
    root: PathBuf,
    outputs: BTreeMap<String, FileRecord>,
    stages: Vec<(String, f64)>,
    started: Instant,
}

impl OutputDir {
    pub fn create(root: &Path, force: bool) -> Result<Self, CliError> {
        if root.exists() {
            if !root.is_dir() {
                return Err(CliError::output(format!("{} exists and is not a directory", root.display())));
            }
            let occupied = std::fs::read_dir(root)?.next().is_some();
            if occupied && !force {
                return Err(CliError::output(format!("{} is not empty; use a new directory or --force", root.display())));
            }
        } else {
            std::fs::create_dir_all(root)?;
        }
        Ok(OutputDir { root: root.to_path_buf(), outputs: BTreeMap::new(), stages: Vec::new(), started: Instant::now() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes through a temporary sibling and renames it into place.
    fn put(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let target = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &target)?;
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: Vec<u8>) -> Result<(), CliError> {
        if name == MANIFEST || name == RUNTIME {
            return Err(CliError::output(format!("`{name}` is reserved")));
        }
        self.put(name, &bytes)?;
        self.outputs.insert(name.to_string(), FileRecord { file: name.to_string(), sha256: sha256_hex(&bytes), bytes: bytes.len() });
        Ok(())
    }

    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> gloc_core::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, bytes)
    }

    /// Runs `f` and records its wall-clock time under `name`.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.stages.push((name.to_string(), t.elapsed().as_secs_f64()));
        out
    }

    /// Re-reads every output, checks it against the recorded hash, then writes
    /// the manifest and the runtime file.
    pub fn finish(self, mut manifest: RunManifest, workers: usize) -> Result<(), CliError> {
        for rec in self.outputs.values() {
            let bytes = std::fs::read(self.path(&rec.file))?;
            if sha256_hex(&bytes) != rec.sha256 {
                return Err(CliError::output(format!("{} changed after it was written", rec.file)));
            }
        }
        manifest.outputs = self.outputs.values().cloned().collect();
        manifest.timings = RUNTIME.to_string();
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        self.put(MANIFEST, &bytes)?;
        let runtime = Runtime { command: manifest.command.clone(), workers, total_secs: self.started.elapsed().as_secs_f64(), stages: self.stages.clone() };
        let mut bytes = serde_json::to_vec_pretty(&runtime)?;
        bytes.push(b'\n');
        self.put(RUNTIME, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> RunManifest {
        RunManifest {
            command: "t".into(),
            tool_version: "0".into(),
            config: Value::Null,
            seeds: BTreeMap::new(),
            dataset_digest: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: String::new(),
            details: BTreeMap::new(),
        }
    }

    #[test]
    fn refuses_occupied_directories_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("out");
        let mut out = OutputDir::create(&dir, false).unwrap();
        out.write("a.csv", b"x\n".to_vec()).unwrap();
        assert!(out.write(MANIFEST, Vec::new()).is_err());
        out.finish(manifest(), 1).unwrap();
        assert!(OutputDir::create(&dir, false).is_err());
        assert!(OutputDir::create(&dir, true).is_ok());
        let m: Value = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(m["outputs"][0]["file"], "a.csv");
        assert_eq!(m["outputs"][0]["sha256"], sha256_hex(b"x\n"));
        assert!(dir.join(RUNTIME).exists());
        assert!(!dir.join(".a.csv.tmp").exists());
    }
}
