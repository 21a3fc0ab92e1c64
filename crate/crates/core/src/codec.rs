//! Byte-level helpers shared by every persisted artifact.
//!
//! Artifacts are stored as a pair of files: a pretty-printed JSON manifest
//! (`name.json`) and a raw little-endian payload (`name.bin`). The manifest
//! records the payload length and SHA-256 so that truncation or tampering is
//! detected before any value is decoded.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn f64_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn f32_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn u32_le_bytes(values: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Sequential reader over a payload that reports byte offsets on failure.
pub struct PayloadReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self {
            path,
            bytes,
            offset: 0,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Corrupt {
                path: self.path.display().to_string(),
                offset: self.bytes.len(),
                reason: format!(
                    "truncated payload while reading {what}: need {n} bytes at offset {}",
                    self.offset
                ),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    pub fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(count * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(count * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }

    pub fn u32s(&mut self, count: usize, what: &str) -> Result<Vec<u32>> {
        let raw = self.take(count * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }

    pub fn finish(self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::Corrupt {
                path: self.path.display().to_string(),
                offset: self.offset,
                reason: format!("{} trailing bytes", self.bytes.len() - self.offset),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Envelope<M> {
    format: String,
    payload_file: String,
    payload_bytes: usize,
    payload_sha256: String,
    meta: M,
}

/// Path of the binary sidecar belonging to a manifest path.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `manifest` (JSON) and `payload` (raw bytes) side by side.
pub fn write_artifact<M: Serialize>(
    manifest_path: &Path,
    format: &str,
    meta: &M,
    payload: &[u8],
) -> Result<()> {
    let bin = payload_path(manifest_path);
    let envelope = Envelope {
        format: format.to_string(),
        payload_file: bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        payload_bytes: payload.len(),
        payload_sha256: sha256_hex(payload),
        meta,
    };
    write_json(manifest_path, &envelope)?;
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))
}

/// Reads an artifact written by [`write_artifact`], verifying format tag,
/// payload length and payload hash.
pub fn read_artifact<M: DeserializeOwned>(manifest_path: &Path, format: &str) -> Result<(M, Vec<u8>)> {
    let envelope: Envelope<M> = read_json(manifest_path)?;
    let bin = manifest_path.with_file_name(&envelope.payload_file);
    let corrupt = |offset: usize, reason: String| Error::Corrupt {
        path: bin.display().to_string(),
        offset,
        reason,
    };
    if envelope.format != format {
        return Err(Error::Corrupt {
            path: manifest_path.display().to_string(),
            offset: 0,
            reason: format!("expected format `{format}`, found `{}`", envelope.format),
        });
    }
    let payload = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if payload.len() != envelope.payload_bytes {
        return Err(corrupt(
            payload.len().min(envelope.payload_bytes),
            format!(
                "payload has {} bytes, manifest declares {}",
                payload.len(),
                envelope.payload_bytes
            ),
        ));
    }
    let digest = sha256_hex(&payload);
    if digest != envelope.payload_sha256 {
        return Err(Error::HashMismatch {
            what: "payload",
            task_id: manifest_path.display().to_string(),
            expected: envelope.payload_sha256,
            found: digest,
        });
    }
    Ok((envelope.meta, payload))
}

/// SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_payload_is_reported_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        write_artifact(&path, "test", &42u32, &f64_le_bytes(&[1.0, 2.0])).unwrap();
        let bin = payload_path(&path);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..11]).unwrap();
        match read_artifact::<u32>(&path, "test") {
            Err(Error::Corrupt { offset, .. }) => assert_eq!(offset, 11),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn reader_rejects_short_reads() {
        let bytes = f32_le_bytes(&[1.0, 2.0, 3.0]);
        let path = Path::new("mem");
        let mut r = PayloadReader::new(path, &bytes);
        assert_eq!(r.f32s(2, "a").unwrap(), vec![1.0, 2.0]);
        assert!(r.f32s(2, "b").is_err());
    }

    #[test]
    fn flipped_byte_fails_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.json");
        write_artifact(&path, "test", &"meta", &u32_le_bytes(&[7, 8, 9])).unwrap();
        let bin = payload_path(&path);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(
            read_artifact::<String>(&path, "test"),
            Err(Error::HashMismatch { .. })
        ));
    }
}
