//! Data-file emission. Every file starts with the schema version, config
//! hash and seed; nothing host- or time-dependent goes into these files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Bumped whenever a column or JSON field changes meaning or position.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub config_sha256: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Table {
    pub name: &'static str,
    pub header: &'static [&'static str],
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &'static str, header: &'static [&'static str]) -> Self {
        Self {
            name,
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// Shortest round-trip decimal, switching to exponent form for very small
/// or very large magnitudes.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if x != 0.0 && x.is_finite() && !(1e-4..1e9).contains(&a) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

#[derive(Debug, Clone, Serialize)]
pub struct WrittenFile {
    pub name: String,
    pub sha256: String,
}

pub struct Emitter {
    dir: PathBuf,
    format: OutputFormat,
    provenance: Provenance,
    written: Vec<WrittenFile>,
}

impl Emitter {
    pub fn new(dir: &Path, format: OutputFormat, provenance: Provenance) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            format,
            provenance,
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes the tables as CSV files, or the JSON payload as `<stem>.json`.
    pub fn emit<T: Serialize>(&mut self, stem: &str, tables: &[Table], payload: &T) -> Result<(), CliError> {
        match self.format {
            OutputFormat::Csv => {
                for t in tables {
                    let bytes = self.csv_bytes(t)?;
                    self.write(&format!("{}.csv", t.name), &bytes)?;
                }
            }
            OutputFormat::Json => {
                #[derive(Serialize)]
                struct Doc<'a, T> {
                    #[serde(flatten)]
                    provenance: &'a Provenance,
                    data: &'a T,
                }
                let mut bytes = serde_json::to_vec_pretty(&Doc {
                    provenance: &self.provenance,
                    data: payload,
                })
                .map_err(|e| CliError::Io(e.to_string()))?;
                bytes.push(b'\n');
                self.write(&format!("{stem}.json"), &bytes)?;
            }
        }
        Ok(())
    }

    fn csv_bytes(&self, t: &Table) -> Result<Vec<u8>, CliError> {
        let p = &self.provenance;
        let mut out = format!(
            "# schema_version={} config_sha256={} seed={}\n",
            p.schema_version, p.config_sha256, p.seed
        )
        .into_bytes();
        let mut w = csv::Writer::from_writer(&mut out);
        let io = |e: csv::Error| CliError::Io(e.to_string());
        w.write_record(t.header).map_err(io)?;
        for r in &t.rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush()?;
        drop(w);
        Ok(out)
    }

    /// Writes raw bytes and records the file for the manifest.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.written.push(WrittenFile {
            name: name.to_string(),
            sha256: Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect(),
        });
        Ok(())
    }

    pub fn written(&self) -> &[WrittenFile] {
        &self.written
    }
}
