//! Checkpoint file: `NMSLABCK`, a little-endian u32 header length, a JSON
//! header, then the weights as little-endian f64 in layer order (for each
//! conv: weights `[cout][cin][k][k]`, then biases).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, DetectorParams};
use crate::error::{LabError, Result};
use crate::fileio::{fingerprint, read_file, read_header, write_atomic, write_header};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NMSLABCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: ArchConfig,
    num_params: usize,
    /// Fingerprint of the configuration that produced the weights.
    fingerprint: String,
    #[serde(default)]
    accepted_mask_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DetectorParams,
    pub fingerprint: String,
    /// Background mask ratio at which adversarial training stopped, if any.
    pub accepted_mask_ratio: Option<f64>,
}

impl Checkpoint {
    pub fn new(params: DetectorParams, fingerprint: String) -> Self {
        Self { params, fingerprint, accepted_mask_ratio: None }
    }

    /// Fingerprint of the weights themselves.
    pub fn weights_fingerprint(&self) -> String {
        fingerprint(&self.params.weights)
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    ck.params.check_finite()?;
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        arch: ck.params.arch.clone(),
        num_params: ck.params.weights.len(),
        fingerprint: ck.fingerprint.clone(),
        accepted_mask_ratio: ck.accepted_mask_ratio,
    };
    let json = serde_json::to_vec(&header).map_err(|e| LabError::format(path, e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 12 + 8 * header.num_params);
    write_header(&mut out, MAGIC, &json);
    for w in &ck.params.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    let (json, off) = read_header(path, &bytes, MAGIC)?;
    let header: Header = serde_json::from_slice(json).map_err(|e| LabError::format(path, e.to_string()))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(LabError::format(path, format!("unsupported checkpoint version {}", header.format_version)));
    }
    header.arch.validate()?;
    if header.num_params != header.arch.num_params() {
        return Err(LabError::format(
            path,
            format!("header declares {} weights, architecture needs {}", header.num_params, header.arch.num_params()),
        ));
    }
    let payload = &bytes[off..];
    if payload.len() != 8 * header.num_params {
        return Err(LabError::format(path, format!("expected {} weight bytes, found {}", 8 * header.num_params, payload.len())));
    }
    let weights = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let params = DetectorParams { arch: header.arch, weights };
    params.check_finite()?;
    Ok(Checkpoint { params, fingerprint: header.fingerprint, accepted_mask_ratio: header.accepted_mask_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut ck = Checkpoint::new(DetectorParams::init(ArchConfig::default(), 3).unwrap(), "abc".into());
        ck.accepted_mask_ratio = Some(0.7);
        save_checkpoint(&p, &ck).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.weights_fingerprint(), ck.weights_fingerprint());
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = Checkpoint::new(DetectorParams::zeros(ArchConfig::default()).unwrap(), "x".into());
        save_checkpoint(&p, &ck).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(LabError::Format { .. })));
        std::fs::write(&p, b"NOTACKPT").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(LabError::Format { .. })));
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(LabError::Io { .. })));
    }
}
