use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::io::write_atomic;

/// Provenance record written next to the outputs of every command.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub toolkit_version: String,
    pub duration_ms: u128,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        Self {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                config: String::new(),
                seed: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
                duration_ms: 0,
            },
        }
    }

    pub fn config(&mut self, text: &str) -> &mut Self {
        self.manifest.config = text.to_string();
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.manifest.seed = Some(seed);
        self
    }

    pub fn input(&mut self, p: &Path) -> &mut Self {
        self.manifest.inputs.push(p.display().to_string());
        self
    }

    pub fn output(&mut self, p: &Path) -> &mut Self {
        self.manifest.outputs.push(p.display().to_string());
        self
    }

    /// Writes `<stem>.manifest.json` into `dir`.
    pub fn write(&mut self, dir: &Path, stem: &str) -> CliResult<PathBuf> {
        self.manifest.duration_ms = self.started.elapsed().as_millis();
        let path = dir.join(format!("{stem}.manifest.json"));
        let json = serde_json::to_vec_pretty(&self.manifest).map_err(|e| CliError::Io(e.to_string()))?;
        write_atomic(&path, &json)?;
        Ok(path)
    }
}

/// Directory and stem for the manifest of a single-file output.
pub fn beside(path: &Path) -> (PathBuf, String) {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    let stem = path.file_stem().map_or("output".into(), |s| s.to_string_lossy().into_owned());
    (dir, stem)
}
