//! Metrics rows: space-separated `key=value` pairs, one record per line.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.log";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub epoch: u64,
    /// Optimizer steps completed before this one.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: u64,
    pub step: u64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub images_per_sec: f64,
    /// Estimated from tape tensor sizes, summed over workers.
    pub peak_activation_bytes: u64,
    pub wall_seconds: f64,
    pub workers: usize,
    pub batch_size: usize,
}

fn field<T: std::str::FromStr>(row: &str, key: &str) -> Result<T> {
    row.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::Validation(format!("metrics row lacks {key}")))?
        .parse()
        .map_err(|_| Error::Validation(format!("metrics row has a bad {key}")))
}

impl MetricsRecord {
    pub fn to_row(&self) -> String {
        format!(
            "epoch={} step={} train_loss={} val_acc={} lr={} images_per_sec={:.2} peak_activation_bytes={} wall_seconds={:.3} workers={} batch_size={}",
            self.epoch,
            self.step,
            self.train_loss,
            self.val_acc,
            self.lr,
            self.images_per_sec,
            self.peak_activation_bytes,
            self.wall_seconds,
            self.workers,
            self.batch_size
        )
    }

    pub fn parse_row(row: &str) -> Result<Self> {
        Ok(MetricsRecord {
            epoch: field(row, "epoch")?,
            step: field(row, "step")?,
            train_loss: field(row, "train_loss")?,
            val_acc: field(row, "val_acc")?,
            lr: field(row, "lr")?,
            images_per_sec: field(row, "images_per_sec")?,
            peak_activation_bytes: field(row, "peak_activation_bytes")?,
            wall_seconds: field(row, "wall_seconds")?,
            workers: field(row, "workers")?,
            batch_size: field(row, "batch_size")?,
        })
    }
}

/// Append-only log. Each row is written with one call and flushed, so a
/// killed run leaves only whole rows behind.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl MetricsLog {
    pub fn open(dir: &Path) -> Result<Self> {
        Self::open_named(dir, METRICS_FILE)
    }

    pub fn open_named(dir: &Path, name: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(name);
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(MetricsLog {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, row: &str) -> Result<()> {
        let mut f = self.file.lock().expect("metrics log poisoned");
        f.write_all(format!("{row}\n").as_bytes())?;
        f.flush()?;
        Ok(())
    }
}
