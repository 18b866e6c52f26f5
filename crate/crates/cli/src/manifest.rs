//! The run manifest: every file a command wrote, with checksums, and the
//! wall-clock time of each stage. Written after everything else.

use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};
use toml::{Table, Value};

pub const FILE_NAME: &str = "manifest.toml";

#[derive(Debug, Clone)]
pub struct Manifest {
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
    pub timings: Vec<(String, f64)>,
}

impl Manifest {
    pub fn new(config_hash: &str, out_dir: &Path) -> Self {
        Self { config_hash: config_hash.to_string(), out_dir: out_dir.to_path_buf(), artifacts: Vec::new(), timings: Vec::new() }
    }

    pub fn add(&mut self, path: &Path) {
        if !self.artifacts.iter().any(|p| p == path) {
            self.artifacts.push(path.to_path_buf());
        }
    }

    /// Run `f` and record its duration under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let start = Instant::now();
        let out = f(self);
        let secs = start.elapsed().as_secs_f64();
        log::info!("{stage}: {secs:.3} s");
        self.timings.push((stage.to_string(), secs));
        out
    }

    fn display_path(&self, p: &Path) -> String {
        p.strip_prefix(&self.out_dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    /// Write `manifest.toml` into the output directory; `status` is the outcome of the command.
    pub fn write(&self, status: &str) -> std::io::Result<PathBuf> {
        let mut root = Table::new();
        root.insert("config_hash".into(), Value::String(self.config_hash.clone()));
        root.insert("tool_version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
        root.insert("status".into(), Value::String(status.into()));
        let mut timings = Table::new();
        for (stage, secs) in &self.timings {
            timings.insert(stage.clone(), Value::Float(*secs));
        }
        root.insert("timings_s".into(), Value::Table(timings));
        let mut files = Vec::new();
        for p in &self.artifacts {
            let bytes = std::fs::read(p)?;
            let mut t = Table::new();
            t.insert("path".into(), Value::String(self.display_path(p)));
            t.insert("bytes".into(), Value::Integer(bytes.len() as i64));
            t.insert("sha256".into(), Value::String(hex::encode(Sha256::digest(&bytes))));
            files.push(Value::Table(t));
        }
        root.insert("artifact".into(), Value::Array(files));
        let path = self.out_dir.join(FILE_NAME);
        std::fs::write(&path, root.to_string())?;
        Ok(path)
    }
}
