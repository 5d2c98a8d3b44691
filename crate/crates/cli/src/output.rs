//! Atomic file output, CSV formatting and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use tempfile::NamedTempFile;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Floats with 17 significant digits, enough to reload them bit-exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Output {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a temporary file in the target directory and renames it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes to JSON");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Builds a CSV document in memory from a header and rows of cells.
pub fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub global: u64,
    #[serde(flatten)]
    pub derived: std::collections::BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
struct ManifestDoc<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    seeds: &'a Seeds,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_clock_seconds: Option<f64>,
    outputs: &'a [String],
    config: &'a str,
}

/// What the manifest repeats back about the run's inputs.
pub struct Echo {
    pub text: String,
    pub record_timing: bool,
}

impl Echo {
    pub fn config(cfg: &ExperimentConfig) -> Self {
        Echo {
            text: cfg.to_toml(),
            record_timing: cfg.output.record_timing,
        }
    }

    pub fn args(text: String) -> Self {
        Echo {
            text,
            record_timing: false,
        }
    }
}

/// Run manifest, written when a run starts and rewritten when it ends.
pub struct Manifest {
    path: PathBuf,
    command: String,
    seeds: Seeds,
    config: String,
    outputs: Vec<String>,
    started: Option<Instant>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn begin(dir: &Path, command: &str, echo: Echo, seeds: Seeds) -> CliResult<Self> {
        let m = Manifest {
            path: dir.join(MANIFEST_FILE),
            command: command.to_string(),
            seeds,
            config: echo.text,
            outputs: Vec::new(),
            started: echo.record_timing.then(Instant::now),
        };
        m.write(RunStatus::Running, None)?;
        Ok(m)
    }

    pub fn record(&mut self, file: &str) {
        self.outputs.push(file.to_string());
    }

    pub fn finish(&self, status: RunStatus, error: Option<String>) -> CliResult<()> {
        self.write(status, error)
    }

    fn write(&self, status: RunStatus, error: Option<String>) -> CliResult<()> {
        let doc = ManifestDoc {
            tool: "bilevel",
            version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            status,
            error,
            seeds: &self.seeds,
            wall_clock_seconds: self.started.map(|s| s.elapsed().as_secs_f64()),
            outputs: &self.outputs,
            config: &self.config,
        };
        write_json(&self.path, &doc)
    }
}

/// Output directory plus the manifest tracking what has been written there.
pub struct Sink {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Sink {
    pub fn open(dir: &Path, command: &str, echo: Echo, seeds: Seeds) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest = Manifest::begin(dir, command, echo, seeds)?;
        Ok(Sink {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.manifest.record(name);
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        write_json(&self.dir.join(name), value)?;
        self.manifest.record(name);
        Ok(())
    }

    /// Finalizes the manifest with the outcome of `result`.
    pub fn close<T>(self, result: CliResult<T>) -> CliResult<T> {
        match &result {
            Ok(_) => self.manifest.finish(RunStatus::Complete, None)?,
            Err(e) => self.manifest.finish(RunStatus::Failed, Some(e.to_string()))?,
        }
        result
    }
}
