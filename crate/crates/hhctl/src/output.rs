//! Run directories: CSV tables, field binaries, invariant records and the manifest.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use hardy_control::Field;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One file written by a run, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    /// `csv`, `field` or `toml`.
    pub kind: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub operation: String,
    pub seconds: f64,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub timings: Vec<Timing>,
    pub files: Vec<FileRecord>,
    pub invariants: Vec<CheckRecord>,
    pub passed: bool,
}

/// SHA-256 of the configuration text with line endings normalised to `\n`.
pub fn scenario_hash(text: &str) -> String {
    hex(&Sha256::digest(text.replace("\r\n", "\n").as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Shortest round-trip scientific notation, so identical runs give identical bytes.
pub fn num(x: f64) -> String {
    format!("{x:e}")
}

/// Write through a temporary file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Accumulates the outputs of one run.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    pub files: Vec<FileRecord>,
    pub timings: Vec<Timing>,
    pub checks: Vec<CheckRecord>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(RunDir { root: root.to_path_buf(), files: Vec::new(), timings: Vec::new(), checks: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn record(&mut self, name: &str, kind: &str, bytes: &[u8]) -> Result<()> {
        atomic_write(&self.root.join(name), bytes)?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileRecord { path: name.to_string(), kind: kind.to_string(), bytes: bytes.len() as u64, sha256: hex(&Sha256::digest(bytes)) });
        Ok(())
    }

    pub fn write_csv<R, I, S>(&mut self, name: &str, header: &[&str], rows: R) -> Result<()>
    where
        R: IntoIterator<Item = I>,
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        self.record(name, "csv", &bytes)
    }

    pub fn write_field(&mut self, name: &str, field: &Field) -> Result<()> {
        let mut bytes = Vec::new();
        field.write_binary(&mut bytes)?;
        self.record(name, "field", &bytes)
    }

    pub fn write_text(&mut self, name: &str, kind: &str, text: &str) -> Result<()> {
        self.record(name, kind, text.as_bytes())
    }

    pub fn timed<T>(&mut self, operation: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push(Timing { operation: operation.to_string(), seconds: start.elapsed().as_secs_f64() });
        out
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) -> bool {
        let detail = detail.into();
        if passed {
            log::info!("{name}: ok ({detail})");
        } else {
            log::warn!("{name}: FAILED ({detail})");
        }
        self.checks.push(CheckRecord { name: name.to_string(), passed, detail });
        passed
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckRecord> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// Fold a sub-run (a sweep point) into this one under `prefix/`.
    pub fn absorb(&mut self, prefix: &str, child: RunDir) {
        for mut f in child.files {
            f.path = format!("{prefix}/{}", f.path);
            self.files.push(f);
        }
        for mut t in child.timings {
            t.operation = format!("{prefix}/{}", t.operation);
            self.timings.push(t);
        }
        for mut c in child.checks {
            c.name = format!("{prefix}/{}", c.name);
            self.checks.push(c);
        }
    }

    /// Write `manifest.json` last; the file list covers everything written so far.
    pub fn finish(&mut self, subcommand: &str, scenario: &str, hash: &str, seed: u64) -> Result<Manifest> {
        let manifest = Manifest {
            tool: "hhctl".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            scenario: scenario.into(),
            scenario_hash: hash.into(),
            seed,
            timings: self.timings.clone(),
            files: self.files.clone(),
            invariants: self.checks.clone(),
            passed: self.passed(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        atomic_write(&self.root.join("manifest.json"), text.as_bytes())?;
        Ok(manifest)
    }
}
