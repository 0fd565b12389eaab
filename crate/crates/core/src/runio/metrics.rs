//! Line-delimited JSON metrics stream, one record per epoch.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::trainer::MetricsRecord;

pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends and flushes one record.
    pub fn log(&mut self, record: &MetricsRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_string(record).map_err(std::io::Error::other)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()
    }
}

pub fn read(path: &Path) -> std::io::Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_all(path: &Path, records: &[MetricsRecord]) -> std::io::Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(std::io::Error::other)?);
        text.push('\n');
    }
    fs::write(path, text)
}

/// Drops records after `epoch` (used when resuming from a checkpoint).
pub fn truncate_after(path: &Path, epoch: u64) -> std::io::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<MetricsRecord> = read(path)?.into_iter().filter(|r| r.epoch <= epoch).collect();
    write_all(path, &kept)
}
