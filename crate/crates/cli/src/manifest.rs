use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

pub const FILE: &str = "manifest.json";

/// Record of one command invocation. Only the `*_at` fields vary between
/// identical runs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64, outputs: Vec<PathBuf>) -> Result<Self, CliError> {
        Ok(Self {
            command: command.into(),
            config: serde_json::to_value(config)?,
            seed,
            version: format!("v{}", env!("CARGO_PKG_VERSION")),
            started_at: now(),
            finished_at: None,
            outputs,
        })
    }

    /// Written through a temporary file and a rename.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_atomic(&dir.join(FILE), &serde_json::to_vec_pretty(self)?)
    }

    pub fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        self.finished_at = Some(now());
        self.write(dir)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::from(e).context(tmp.display()))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::from(e).context(path.display()))?;
    Ok(())
}

/// Creates `--out` if needed.
pub fn out_dir(out: &Option<PathBuf>) -> Result<&Path, CliError> {
    let dir = out.as_deref().ok_or_else(|| CliError::user("--out DIR is required"))?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::from(e).context(dir.display()))?;
    Ok(dir)
}

/// Reads a JSON config, or the default when no path is given.
pub fn read_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::from(e).context(p.display()))?;
            serde_json::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", p.display())))
        }
    }
}
