//! Versioned, checksummed checkpoint container.
//!
//! Layout: 8-byte magic `HIPDCKPT`, format version (`u32` LE), payload length
//! (`u64` LE), SHA-256 of the payload (32 bytes), then the JSON payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trainer::Trainer;

pub const MAGIC: &[u8; 8] = b"HIPDCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8 + 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} cannot be read by this build (expects version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint integrity check failed: {0}")]
    Integrity(&'static str),
    #[error("checkpoint payload: {0}")]
    Payload(#[from] serde_json::Error),
}

pub fn encode(trainer: &Trainer) -> Result<Vec<u8>, CheckpointError> {
    encode_with_version(trainer, FORMAT_VERSION)
}

fn encode_with_version(trainer: &Trainer, version: u32) -> Result<Vec<u8>, CheckpointError> {
    let payload = serde_json::to_vec(trainer)?;
    let mut out = Vec::with_capacity(HEADER + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Validates the container completely before deserialising anything.
pub fn decode(bytes: &[u8]) -> Result<Trainer, CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER {
        return Err(CheckpointError::Integrity("truncated header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let payload = &bytes[HEADER..];
    if payload.len() != len {
        return Err(CheckpointError::Integrity("payload length does not match header"));
    }
    if Sha256::digest(payload).as_slice() != &bytes[20..52] {
        return Err(CheckpointError::Integrity("checksum mismatch"));
    }
    Ok(serde_json::from_slice(payload)?)
}

pub fn file_name(epoch: u64) -> String {
    format!("checkpoint-{epoch:06}.ckpt")
}

fn epoch_of(path: &Path) -> Option<u64> {
    let name = path.file_name()?.to_str()?;
    name.strip_prefix("checkpoint-")?.strip_suffix(".ckpt")?.parse().ok()
}

/// Writes `checkpoint-<epoch>.ckpt` atomically (temp file, then rename).
pub fn save(run_dir: &Path, trainer: &Trainer) -> Result<PathBuf, CheckpointError> {
    let path = run_dir.join(file_name(trainer.epoch));
    let tmp = run_dir.join(format!(".{}.tmp", file_name(trainer.epoch)));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&encode(trainer)?)?;
    f.sync_all()?;
    fs::rename(&tmp, &path)?;
    Ok(path)
}

pub fn load(path: &Path) -> Result<Trainer, CheckpointError> {
    decode(&fs::read(path)?)
}

/// Checkpoints in `run_dir`, oldest first.
pub fn list(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>, CheckpointError> {
    let mut found = Vec::new();
    for entry in fs::read_dir(run_dir)? {
        let path = entry?.path();
        if let Some(e) = epoch_of(&path) {
            found.push((e, path));
        }
    }
    found.sort();
    Ok(found)
}

pub fn latest(run_dir: &Path) -> Result<Option<PathBuf>, CheckpointError> {
    Ok(list(run_dir)?.pop().map(|(_, p)| p))
}

/// Deletes all but the newest `keep` checkpoints.
pub fn prune(run_dir: &Path, keep: usize) -> Result<(), CheckpointError> {
    let all = list(run_dir)?;
    let n = all.len().saturating_sub(keep);
    for (_, p) in &all[..n] {
        fs::remove_file(p)?;
    }
    Ok(())
}

#[cfg(test)]
pub(crate) fn encode_version_for_test(trainer: &Trainer, version: u32) -> Vec<u8> {
    encode_with_version(trainer, version).expect("serialisable")
}
