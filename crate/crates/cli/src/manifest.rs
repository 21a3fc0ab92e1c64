//! Per-directory run manifests and output-directory discipline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use delta_core::codec::{file_sha256, payload_path, read_json, write_json};
use serde::{Deserialize, Serialize};

use crate::config::LabConfig;
use crate::lab::LabResult;
use crate::LabError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Effective configuration after flags, file and defaults were merged.
    pub config: LabConfig,
    /// Command-specific parameters and diagnostics.
    pub params: BTreeMap<String, serde_json::Value>,
    /// Input path → SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name → SHA-256, relative to the output directory.
    pub outputs: BTreeMap<String, String>,
    pub seed: u64,
    pub version: String,
    pub wall_clock_ms: u128,
}

impl RunManifest {
    pub fn load(dir: &Path) -> LabResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(LabError::Missing(format!("run manifest {}", path.display())));
        }
        Ok(read_json(&path)?)
    }

    pub fn param(&self, key: &str) -> Option<&serde_json::Value> {
        self.params.get(key)
    }
}

/// An output directory being filled by one command.
pub struct OutDir {
    pub path: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl OutDir {
    /// Claims `path`. A non-empty directory is refused unless `force`; with
    /// `force`, the outputs listed by its previous manifest are removed.
    pub fn create(path: &Path, command: &str, config: &LabConfig, seed: u64, force: bool) -> LabResult<Self> {
        if path.exists() {
            let non_empty = fs::read_dir(path).map_err(|e| LabError::io(path, e))?.next().is_some();
            if non_empty {
                if !force {
                    return Err(LabError::OutputExists(path.to_path_buf()));
                }
                if let Ok(old) = RunManifest::load(path) {
                    for name in old.outputs.keys() {
                        let _ = fs::remove_file(path.join(name));
                    }
                }
                let _ = fs::remove_file(path.join(MANIFEST_FILE));
            }
        }
        fs::create_dir_all(path).map_err(|e| LabError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config: config.clone(),
                params: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                wall_clock_ms: 0,
            },
            started: Instant::now(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) {
        let value = serde_json::to_value(value).expect("serializable parameter");
        self.manifest.params.insert(key.to_string(), value);
    }

    /// Hashes an input file, and its payload sidecar when present.
    pub fn input(&mut self, path: &Path) -> LabResult<()> {
        self.manifest.inputs.insert(path.display().to_string(), file_sha256(path)?);
        let bin = payload_path(path);
        if bin != path && bin.exists() {
            self.manifest.inputs.insert(bin.display().to_string(), file_sha256(&bin)?);
        }
        Ok(())
    }

    /// Records an output already written under this directory.
    pub fn output(&mut self, name: &str) -> LabResult<()> {
        let path = self.file(name);
        self.manifest.outputs.insert(name.to_string(), file_sha256(&path)?);
        let bin = payload_path(&path);
        if bin != path && bin.exists() {
            let bin_name = bin.file_name().expect("file name").to_string_lossy().into_owned();
            self.manifest.outputs.insert(bin_name, file_sha256(&bin)?);
        }
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> LabResult<()> {
        let path = self.file(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| LabError::io(&path, e))?;
        self.output(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> LabResult<()> {
        write_json(&self.file(name), value)?;
        self.output(name)
    }

    /// Writes the manifest last and returns it.
    pub fn finish(mut self) -> LabResult<RunManifest> {
        self.manifest.wall_clock_ms = self.started.elapsed().as_millis();
        write_json(&self.path.join(MANIFEST_FILE), &self.manifest)?;
        Ok(self.manifest)
    }
}

/// Rejects runs whose suites or pre-trained models differ.
pub fn check_compatible(manifests: &[(PathBuf, RunManifest)]) -> LabResult<()> {
    let Some((first_path, first)) = manifests.first() else {
        return Ok(());
    };
    for (path, m) in &manifests[1..] {
        if m.config.suite != first.config.suite {
            return Err(LabError::Incompatible(format!(
                "{} and {} were generated from different suites",
                first_path.display(),
                path.display()
            )));
        }
        if m.param("base_hash") != first.param("base_hash") {
            return Err(LabError::Incompatible(format!(
                "{} and {} start from different pre-trained models",
                first_path.display(),
                path.display()
            )));
        }
    }
    Ok(())
}
