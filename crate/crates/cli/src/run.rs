use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use starnet::pipeline::checkpoint::hex;

use crate::config::RunConfig;
use crate::CliError;

/// Output directory of one command: `<runs_dir>/<command>-<hash>-<timestamp>`.
pub struct RunDir {
    pub path: PathBuf,
    pub config_hash: String,
}

impl RunDir {
    /// Creates the directory and writes the resolved config snapshot.
    pub fn create(cfg: &RunConfig, command: &str) -> Result<Self, CliError> {
        let config_hash = hex(&cfg.hash());
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        fs::create_dir_all(&cfg.runs_dir).map_err(|e| io(&cfg.runs_dir, e))?;
        let base = format!("{command}-{}-{stamp}", &config_hash[..12]);
        let mut path = cfg.runs_dir.join(&base);
        let mut n = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    path = cfg.runs_dir.join(format!("{base}-{n}"));
                    n += 1;
                }
                Err(e) => return Err(io(&path, e)),
            }
        }
        let run = Self { path, config_hash };
        run.write_json("config.json", cfg)?;
        log::info!("run directory {}", run.path.display());
        Ok(run)
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let path = self.join(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| io(&path, e))?;
        Ok(path)
    }
}

pub fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
