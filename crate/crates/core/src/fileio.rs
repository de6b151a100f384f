//! Atomic file writes and configuration fingerprints.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| LabError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| LabError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| LabError::io(path, e))?;
    tmp.persist(path).map_err(|e| LabError::io(path, e.error))?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| LabError::format(path, e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| LabError::io(path, e))
}

/// First 16 hex digits of the SHA-256 of the value's canonical JSON.
///
/// serde_json keeps struct field order, so the encoding is stable for a
/// given type; maps must be ordered (`BTreeMap`) to stay canonical.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config values serialize");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Reads a `magic | u32 header length | JSON header` prefix and returns the
/// header bytes and the offset of the payload.
pub(crate) fn read_header<'a>(path: &Path, bytes: &'a [u8], magic: &[u8]) -> Result<(&'a [u8], usize)> {
    if bytes.len() < magic.len() + 4 || &bytes[..magic.len()] != magic {
        return Err(LabError::format(path, "bad magic"));
    }
    let at = magic.len();
    let len = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let start = at + 4;
    if bytes.len() < start + len {
        return Err(LabError::format(path, "truncated header"));
    }
    Ok((&bytes[start..start + len], start + len))
}

pub(crate) fn write_header(out: &mut Vec<u8>, magic: &[u8], header: &[u8]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path().join("sub")).unwrap().count(), 1);
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        #[derive(Serialize)]
        struct C {
            a: u32,
            b: f64,
        }
        let f1 = fingerprint(&C { a: 1, b: 0.5 });
        assert_eq!(f1, fingerprint(&C { a: 1, b: 0.5 }));
        assert_ne!(f1, fingerprint(&C { a: 2, b: 0.5 }));
        assert_eq!(f1.len(), 16);
    }

    #[test]
    fn header_round_trip_and_errors() {
        let mut v = Vec::new();
        write_header(&mut v, b"MAGIC", b"{}");
        v.extend_from_slice(b"rest");
        let (h, off) = read_header(Path::new("x"), &v, b"MAGIC").unwrap();
        assert_eq!(h, b"{}");
        assert_eq!(&v[off..], b"rest");
        assert!(read_header(Path::new("x"), &v, b"OTHER").is_err());
        assert!(read_header(Path::new("x"), &v[..8], b"MAGIC").is_err());
    }
}
