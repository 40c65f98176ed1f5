//! `manifest.json`: the first file in every run directory.

use std::path::{Path, PathBuf};

use msvq::{Error, TrainConfig};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub reports: Vec<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// Resolved config after file and command-line overrides.
    pub config: TrainConfig,
    pub artifacts: Artifacts,
}

impl Manifest {
    pub fn new(command: &str, config: &TrainConfig) -> Self {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: config.pretraining.seed,
            config: config.clone(),
            artifacts: Artifacts::default(),
        }
    }

    /// The directory's existing manifest, or a fresh one if there is none.
    pub fn open_or_new(dir: &Path, command: &str, config: &TrainConfig) -> msvq::Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            return Ok(Manifest::new(command, config));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config {
            field: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn write(&self, dir: &Path) -> msvq::Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| io(&path, e))
    }
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
