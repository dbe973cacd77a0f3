use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use umrm_core::checkpoint::{sha256_hex, write_atomic};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    pub artifact_version: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    /// Re-hashes every listed output under `dir`; returns the mismatches.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>, CliError> {
        let mut bad = Vec::new();
        for o in &self.outputs {
            let p = dir.join(&o.path);
            let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
            if sha256_hex(&bytes) != o.sha256 || bytes.len() as u64 != o.bytes {
                bad.push(o.path.clone());
            }
        }
        Ok(bad)
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let p = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
    }
}

/// Version string baked in at build time, `git describe` style when the
/// build environment provides one.
pub fn artifact_version() -> String {
    match option_env!("UMRM_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => d.to_string(),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Atomic writer for one stage's output directory that records what it wrote.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<OutputFile>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        write_atomic(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.retain(|o| o.path != name);
        self.written.push(OutputFile {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn finish(self, stage: &str, config_hash: String, seed: u64, wall_clock_secs: f64) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            stage: stage.to_string(),
            config_hash,
            artifact_version: artifact_version(),
            seed,
            wall_clock_secs,
            outputs: self.written,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Core(e.into()))?;
        text.push('\n');
        let path = self.dir.join(MANIFEST_FILE);
        write_atomic(&path, text.as_bytes()).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}
