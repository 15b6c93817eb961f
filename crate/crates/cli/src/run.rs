//! Timestamped run directories and the files every run emits.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use efcm_core::metrics::MetricsRecord;

use crate::config::RunConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Files written by every subcommand.
pub const COMMON_FILES: [&str; 4] = ["config.toml", "run.json", "metrics.json", "metrics.csv"];

#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// `out/<subcommand>-<UTC timestamp>-s<seed>`, suffixed `-1`, `-2`, …
    /// if the name is taken. Existing directories are never reused.
    pub fn create(out: &Path, subcommand: &str, seed: u64) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let base = format!("{subcommand}-{stamp}-s{seed}");
        for i in 0.. {
            let name = if i == 0 { base.clone() } else { format!("{base}-{i}") };
            let path = out.join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e).with_context(|| format!("creating {}", path.display())),
            }
        }
        unreachable!()
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    pub fn subdir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path.join(rel);
        fs::create_dir_all(&p)?;
        Ok(p)
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        fs::write(self.join("config.toml"), toml::to_string_pretty(cfg)?)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        fs::write(self.join(rel), serde_json::to_vec_pretty(value)?)?;
        Ok(())
    }
}

/// Environment and seed record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub subcommand: String,
    pub seed: u64,
    pub args: Vec<String>,
    pub started: String,
    pub finished: Option<String>,
    pub package_version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub status: String,
}

impl RunRecord {
    pub fn start(subcommand: &str, seed: u64) -> Self {
        Self {
            version: SCHEMA_VERSION,
            subcommand: subcommand.to_string(),
            seed,
            args: std::env::args().collect(),
            started: chrono::Utc::now().to_rfc3339(),
            finished: None,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: rayon_threads(),
            status: "running".into(),
        }
    }

    pub fn finish(&mut self, status: &str) {
        self.finished = Some(chrono::Utc::now().to_rfc3339());
        self.status = status.to_string();
    }
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Deterministic results of one run: identical config and seed give an
/// identical file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub version: u32,
    pub subcommand: String,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(default)]
    pub summary: serde_json::Value,
}

impl MetricsFile {
    pub fn new(subcommand: &str, seed: u64) -> Self {
        Self {
            version: SCHEMA_VERSION,
            subcommand: subcommand.to_string(),
            seed,
            records: vec![],
            best_epoch: None,
            summary: serde_json::Value::Null,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// One CSV row per metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub split: String,
    pub acc: f64,
    pub auc: f64,
    pub epoch: Option<usize>,
    pub checkpoint: Option<String>,
    /// Per-class counts joined with `;`.
    pub class_counts: String,
}

impl From<&MetricsRecord> for RecordRow {
    fn from(m: &MetricsRecord) -> Self {
        Self {
            split: m.split.clone(),
            acc: m.acc,
            auc: m.auc,
            epoch: m.epoch,
            checkpoint: m.checkpoint.clone(),
            class_counts: m.class_counts.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
        }
    }
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<R>, _>>()?)
}

pub const RECORD_HEADER: [&str; 6] = ["split", "acc", "auc", "epoch", "checkpoint", "class_counts"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_are_never_reused() {
        let tmp = tempfile::tempdir().unwrap();
        let a = RunDir::create(tmp.path(), "x", 1).unwrap();
        let b = RunDir::create(tmp.path(), "x", 1).unwrap();
        assert_ne!(a.path, b.path);
    }

    #[test]
    fn record_rows_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let rows = vec![RecordRow {
            split: "test".into(),
            acc: 0.5,
            auc: 0.75,
            epoch: Some(3),
            checkpoint: None,
            class_counts: "2;2".into(),
        }];
        let p = tmp.path().join("m.csv");
        write_csv(&p, &rows, &RECORD_HEADER).unwrap();
        assert_eq!(read_csv::<RecordRow>(&p).unwrap(), rows);
        write_csv::<RecordRow>(&p, &[], &RECORD_HEADER).unwrap();
        assert!(read_csv::<RecordRow>(&p).unwrap().is_empty());
    }
}
