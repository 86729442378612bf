use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written last and atomically.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub code_version: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
    pub checks: BTreeMap<String, bool>,
    pub success: bool,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of the running executable, standing in for the code version.
fn code_version() -> String {
    let exe = std::env::current_exe().ok().and_then(|p| sha256_file(&p).ok());
    format!("{}+{}", env!("CARGO_PKG_VERSION"), exe.as_deref().map(|h| &h[..16]).unwrap_or("unknown"))
}

/// Timestamped output directory collecting artifacts of one command.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    args: Vec<String>,
    config: RunConfig,
    inputs: Vec<FileHash>,
    outputs: Vec<String>,
    checks: BTreeMap<String, bool>,
    started: Instant,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, args: Vec<String>, config: RunConfig) -> Result<Self, CliError> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let mut path = root.join(format!("{command}-{stamp}"));
        let mut k = 1;
        while path.exists() {
            path = root.join(format!("{command}-{stamp}-{k}"));
            k += 1;
        }
        std::fs::create_dir_all(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(Self {
            path,
            command: command.into(),
            args,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            checks: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileHash { path: path.display().to_string(), sha256 });
        Ok(())
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Register an artifact already written under the run directory.
    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.into());
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.file(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
        }
        write_atomic(&path, bytes)?;
        self.output(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.write(name, &bytes)
    }

    pub fn write_png(&mut self, name: &str, image: &detinv::image::Image) -> Result<(), CliError> {
        let path = self.file(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
        }
        image.save_png(&path).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.output(name);
        Ok(())
    }

    pub fn check(&mut self, name: &str, ok: bool) {
        log::info!("check {name}: {}", if ok { "pass" } else { "FAIL" });
        self.checks.insert(name.into(), ok);
    }

    pub fn checks_passed(&self) -> bool {
        self.checks.values().all(|&v| v)
    }

    pub fn finish(mut self, success: bool) -> Result<PathBuf, CliError> {
        let c = &self.config;
        let mut seeds = BTreeMap::new();
        if let Some(m) = c.seed {
            seeds.insert("master".into(), m);
        }
        seeds.insert("data".into(), c.data.seed);
        seeds.insert("train".into(), c.train.seed);
        seeds.insert("inversion".into(), c.inversion.seed);
        let manifest = RunManifest {
            command: std::mem::take(&mut self.command),
            args: std::mem::take(&mut self.args),
            config: c.clone(),
            seeds,
            code_version: code_version(),
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            checks: std::mem::take(&mut self.checks),
            success,
        };
        let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_atomic(&self.file("manifest.json"), &bytes)?;
        Ok(self.path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}
