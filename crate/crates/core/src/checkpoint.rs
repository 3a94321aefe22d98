//! Binary checkpoints: every parameter (value plus optimizer moments
//! and step count) keyed by its stable name, guarded by a config
//! fingerprint so a file can only be loaded into the run that wrote it.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Param;
use crate::error::{Result, XmodalError};

const MAGIC: &[u8; 8] = b"XMCKPT1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    step: u64,
    best_med_r: Option<f64>,
    entries: Vec<EntryMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub fingerprint: String,
    pub step: u64,
    pub best_med_r: Option<f64>,
    pub n_params: usize,
}

fn ck<T>(r: std::result::Result<T, impl std::fmt::Display>, what: &str) -> Result<T> {
    r.map_err(|e| XmodalError::Checkpoint(format!("{what}: {e}")))
}

pub fn save_checkpoint(
    path: &Path,
    fingerprint: &str,
    step: u64,
    best_med_r: Option<f64>,
    params: &[&Param],
) -> Result<()> {
    let header = Header {
        fingerprint: fingerprint.to_string(),
        step,
        best_med_r,
        entries: params
            .iter()
            .map(|p| EntryMeta {
                name: p.name().to_string(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
                t: p.t,
            })
            .collect(),
    };
    let header_json = ck(serde_json::to_vec(&header), "serialize header")?;

    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for p in params {
        for arr in [&p.value, &p.m, &p.v] {
            for &x in arr.as_standard_layout().iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(XmodalError::Checkpoint("not a checkpoint file".to_string()));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; len];
    r.read_exact(&mut header_json)?;
    ck(serde_json::from_slice(&header_json), "parse header")
}

/// Header-only read, for inspection without a model.
pub fn peek_checkpoint(path: &Path) -> Result<CheckpointMeta> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let header = read_header(&mut r)?;
    Ok(CheckpointMeta {
        fingerprint: header.fingerprint,
        step: header.step,
        best_med_r: header.best_med_r,
        n_params: header.entries.len(),
    })
}

/// Restores values and optimizer state into `params`, which must match
/// the stored entries exactly — same order, names, shapes — and the
/// expected fingerprint must match the stored one.
pub fn load_checkpoint(path: &Path, expected_fingerprint: &str, mut params: Vec<&mut Param>) -> Result<CheckpointMeta> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let header = read_header(&mut r)?;
    if header.fingerprint != expected_fingerprint {
        return Err(XmodalError::Checkpoint(format!(
            "config fingerprint mismatch: checkpoint {}, current {}",
            header.fingerprint, expected_fingerprint
        )));
    }
    if header.entries.len() != params.len() {
        return Err(XmodalError::Checkpoint(format!(
            "parameter count mismatch: checkpoint {}, model {}",
            header.entries.len(),
            params.len()
        )));
    }
    for (entry, p) in header.entries.iter().zip(params.iter()) {
        if entry.name != p.name() || entry.shape != p.value.shape() {
            return Err(XmodalError::Checkpoint(format!(
                "parameter mismatch: checkpoint has `{}` {:?}, model has `{}` {:?}",
                entry.name,
                entry.shape,
                p.name(),
                p.value.shape()
            )));
        }
    }
    for (entry, p) in header.entries.iter().zip(params.iter_mut()) {
        let n = p.value.len();
        let mut buf = vec![0u8; n * 8];
        for field in 0..3 {
            r.read_exact(&mut buf)?;
            let target = match field {
                0 => &mut p.value,
                1 => &mut p.m,
                _ => &mut p.v,
            };
            for (i, x) in target.iter_mut().enumerate() {
                *x = f64::from_le_bytes(buf[i * 8..i * 8 + 8].try_into().unwrap());
            }
        }
        p.t = entry.t;
    }
    Ok(CheckpointMeta {
        fingerprint: header.fingerprint,
        step: header.step,
        best_med_r: header.best_med_r,
        n_params: header.entries.len(),
    })
}
