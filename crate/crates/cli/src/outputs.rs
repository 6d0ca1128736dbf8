use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Kind};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Everything needed to repeat a run: the parsed arguments replay it, the
/// other fields record what they resolved to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub args: Vec<String>,
    pub working_dir: PathBuf,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(subcommand: &str, args: &[String], config: serde_json::Value) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            args: args.to_vec(),
            working_dir: std::env::current_dir().unwrap_or_default(),
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::new(Kind::Usage, e).context(path.display().to_string()))?;
        serde_json::from_str(&text).map_err(|e| CliError::new(Kind::Usage, e).context(path.display().to_string()))
    }
}

/// Tracks files written by a subcommand and deletes them again unless the
/// run finishes with [`Outputs::commit`].
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    /// Creates `dir` (and parents), remembering it for cleanup if it is new.
    pub fn ensure_dir(&mut self, dir: &Path) -> CliResult<()> {
        if dir.is_dir() {
            return Ok(());
        }
        if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
            self.ensure_dir(parent)?;
        }
        fs::create_dir(dir).map_err(|e| io_error(dir, e))?;
        self.dirs.push(dir.to_path_buf());
        Ok(())
    }

    /// Claims a directory that an external writer is about to populate.
    pub fn claim_dir(&mut self, dir: &Path) -> CliResult<()> {
        if dir.exists() {
            return Ok(());
        }
        self.ensure_dir(dir)
    }

    pub fn write(&mut self, path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            self.ensure_dir(parent)?;
        }
        self.files.push(path.to_path_buf());
        fs::write(path, bytes).map_err(|e| io_error(path, e))
    }

    pub fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        self.write(path, text)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(Kind::Data, e).context(path.display().to_string())
}
