//! Artifact directory: echoed config, CSV tables with versioned headers,
//! JSON reports, a manifest of content hashes, and a plain-text run log.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Version suffix of every CSV schema.
pub const CSV_SCHEMA_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub status: String,
    pub artifacts: Vec<ManifestEntry>,
}

pub struct Run {
    pub command: String,
    pub config: RunConfig,
    pub hash: String,
    out: PathBuf,
    log: Vec<String>,
    artifacts: Vec<ManifestEntry>,
}

impl Run {
    pub fn create(command: &str, config: RunConfig, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let hash = config.hash();
        let mut run = Self {
            command: command.into(),
            hash: hash.clone(),
            out: out.to_path_buf(),
            log: Vec::new(),
            artifacts: Vec::new(),
            config,
        };
        let echo = serde_json::to_string_pretty(&run.config)?;
        run.write_file("config.json", echo.as_bytes())?;
        run.log(format!("command: {command}"));
        run.log(format!("config_hash: {hash}"));
        run.log(format!("seed: {}", run.config.seed));
        run.log(format!("config: {}", serde_json::to_string(&run.config)?));
        Ok(run)
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn log(&mut self, line: impl Into<String>) {
        self.log.push(line.into());
    }

    fn write_file(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(ManifestEntry {
            file: name.into(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    /// CSV whose first two columns are the schema tag and the config hash.
    pub fn write_csv(&mut self, name: &str, table: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut head = vec!["schema", "config_hash"];
        head.extend_from_slice(header);
        w.write_record(&head)?;
        let schema = format!("{table}.{CSV_SCHEMA_VERSION}");
        for row in rows {
            let mut r = vec![schema.clone(), self.hash.clone()];
            r.extend(row.iter().cloned());
            w.write_record(&r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("flushing csv: {e}"))?;
        self.write_file(name, &bytes)
    }

    /// JSON object `{config_hash, report}`.
    pub fn write_json<T: Serialize>(&mut self, name: &str, report: &T) -> Result<()> {
        let value = serde_json::json!({
            "config_hash": self.hash,
            "report": report,
        });
        let text = serde_json::to_string_pretty(&value)?;
        self.write_file(name, text.as_bytes())
    }

    /// Raw file that carries its own hash field (checkpoints).
    pub fn write_raw(&mut self, name: &str, text: &str) -> Result<()> {
        self.write_file(name, text.as_bytes())
    }

    /// Write the log and manifest. `ok = false` marks an invariant violation.
    pub fn finish(mut self, ok: bool) -> Result<()> {
        let status = if ok { "ok" } else { "violation" };
        self.log(format!("status: {status}"));
        let mut log = self.log.join("\n");
        log.push('\n');
        fs::write(self.out.join("run.log"), log)?;
        let manifest = Manifest {
            command: self.command.clone(),
            config_hash: self.hash.clone(),
            seed: self.config.seed,
            status: status.into(),
            artifacts: self.artifacts.clone(),
        };
        fs::write(self.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Shortest round-trip form; exponent notation outside `[1e-4, 1e15)`.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}
