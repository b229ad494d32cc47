//! Output files and run manifests. Every file is written to a temporary sibling
//! and renamed into place, so readers never see a partial file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct OutputRecord {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

/// Everything needed to reproduce a run: re-running `gsdlab --out-dir <dir>`
/// followed by `args` writes byte-identical outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub args: &'a [String],
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub version: String,
    pub outputs: Vec<OutputRecord>,
    pub duration_ms: u128,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub struct OutputDir {
    root: PathBuf,
    written: Vec<OutputRecord>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let target = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, &target).with_context(|| format!("moving output into {}", target.display()))?;
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.write_atomic(name, bytes)?;
        self.written.push(OutputRecord {
            file: name.to_string(),
            bytes: bytes.len(),
            sha256: format!("{:x}", Sha256::digest(bytes)),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    /// CSV with a header row, comma-separated, LF line endings.
    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        for row in rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().context("flushing CSV")?;
        self.write_bytes(name, &bytes)
    }

    pub fn finish(
        self,
        command: &str,
        args: &[String],
        config: serde_json::Value,
        seeds: Vec<u64>,
        elapsed: Duration,
        notes: Vec<String>,
    ) -> Result<PathBuf> {
        let manifest = RunManifest {
            command,
            args,
            config,
            seeds,
            version: format!("gsdlab {}", env!("CARGO_PKG_VERSION")),
            outputs: self.written.clone(),
            duration_ms: elapsed.as_millis(),
            notes,
        };
        let name = format!("{command}.manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        self.write_atomic(&name, &bytes)?;
        Ok(self.path(&name))
    }
}
