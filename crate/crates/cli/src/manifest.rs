use std::fs;
use std::path::{Path, PathBuf};

use faag_core::Error;
use serde::Serialize;

/// Everything needed to replay a run: the resolved configuration, the seeds,
/// the model checksum and where the outputs went.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub model_crc32: Option<String>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize) -> Result<Self, Error> {
        Ok(RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config)
                .map_err(|e| Error::InvalidInput(format!("cannot serialize config: {e}")))?,
            model_crc32: None,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn with_model(mut self, path: &Path) -> Result<Self, Error> {
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.model_crc32 = Some(format!("{:08x}", crc32fast::hash(&bytes)));
        self.inputs.push(path.to_path_buf());
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("cannot serialize manifest: {e}")))?;
        fs::write(path, text + "\n").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// `out.wav` -> `out.wav.manifest.json`; a directory gets `run_manifest.json` inside.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    if output.is_dir() {
        return output.join("run_manifest.json");
    }
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}
