//! Portable named-array container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset      | size | content                                   |
//! |-------------|------|-------------------------------------------|
//! | 0           | 8    | magic `MCEGNNCT`                          |
//! | 8           | 8    | `u64` manifest length `L` in bytes        |
//! | 16          | L    | UTF-8 JSON manifest                       |
//! | 16 + L      | ...  | array payloads, `f64` little-endian       |
//!
//! The manifest records the format version, dtype and endianness tags, and
//! for each array its name, shape, byte offset within the payload region, and
//! a SHA-256 of its payload bytes. Arbitrary JSON metadata rides along.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"MCEGNNCT";
pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_MINOR: u32 = 0;
const HEADER: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVersion {
    pub major: u32,
    pub minor: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: FormatVersion,
    pub dtype: String,
    pub endianness: String,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Named arrays in insertion order plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub arrays: Vec<(String, Tensor)>,
    pub metadata: serde_json::Value,
}

impl Container {
    pub fn new() -> Self {
        Container {
            arrays: Vec::new(),
            metadata: serde_json::Value::Null,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.arrays.iter().any(|(n, _)| *n == name) {
            return Err(Error::DuplicateName(name));
        }
        self.arrays.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingArray(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut payload = Vec::new();
        for (name, t) in &self.arrays {
            if entries.iter().any(|e: &ArrayEntry| e.name == *name) {
                return Err(Error::DuplicateName(name.clone()));
            }
            let start = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: start as u64,
                sha256: hex::encode(Sha256::digest(&payload[start..])),
            });
        }
        let manifest = Manifest {
            format_version: FormatVersion {
                major: FORMAT_MAJOR,
                minor: FORMAT_MINOR,
            },
            dtype: "float64".into(),
            endianness: "little".into(),
            arrays: entries,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(HEADER + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            if bytes.len() >= 8 && &bytes[..8] != MAGIC {
                return Err(Error::BadMagic);
            }
            return Err(Error::Truncated {
                needed: HEADER,
                found: bytes.len(),
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = HEADER
            .checked_add(len)
            .ok_or(Error::Truncated {
                needed: usize::MAX,
                found: bytes.len(),
            })?;
        if bytes.len() < body {
            return Err(Error::Truncated {
                needed: body,
                found: bytes.len(),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER..body])?;
        let v = manifest.format_version;
        if v.major != FORMAT_MAJOR {
            return Err(Error::Version {
                found: format!("{}.{}", v.major, v.minor),
                supported: FORMAT_MAJOR,
            });
        }
        if manifest.dtype != "float64" || manifest.endianness != "little" {
            return Err(Error::Version {
                found: format!("{}/{}", manifest.dtype, manifest.endianness),
                supported: FORMAT_MAJOR,
            });
        }
        let payload = &bytes[body..];
        let mut expected_end = 0usize;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for entry in &manifest.arrays {
            let count = numel(&entry.shape);
            let start = entry.offset as usize;
            if start != expected_end {
                return Err(Error::PayloadShape {
                    name: entry.name.clone(),
                    shape: entry.shape.clone(),
                    len: (start.saturating_sub(expected_end)) / 8,
                });
            }
            let end = start + count * 8;
            if payload.len() < end {
                return Err(Error::Truncated {
                    needed: body + end,
                    found: bytes.len(),
                });
            }
            let raw = &payload[start..end];
            if hex::encode(Sha256::digest(raw)) != entry.sha256 {
                return Err(Error::Checksum(entry.name.clone()));
            }
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if arrays.iter().any(|(n, _): &(String, Tensor)| *n == entry.name) {
                return Err(Error::DuplicateName(entry.name.clone()));
            }
            arrays.push((entry.name.clone(), Tensor::new(&entry.shape, data)?));
            expected_end = end;
        }
        if payload.len() != expected_end {
            return Err(Error::PayloadShape {
                name: "<trailing>".into(),
                shape: vec![],
                len: (payload.len() - expected_end) / 8,
            });
        }
        Ok(Container {
            arrays,
            metadata: manifest.metadata,
        })
    }
}

/// Writes atomically: a temporary file in the target directory is renamed
/// over `path`.
pub fn save_container(path: &Path, container: &Container) -> Result<()> {
    let bytes = container.to_bytes()?;
    write_atomic(path, &bytes)
}

pub fn load_container(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Container::from_bytes(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.push("a", Tensor::randn(&[3, 4], 1)).unwrap();
        c.push("b", Tensor::new(&[0], vec![]).unwrap()).unwrap();
        c.push("c", Tensor::new(&[2], vec![f64::MIN_POSITIVE, -0.0]).unwrap()).unwrap();
        c.metadata = serde_json::json!({"kind": "test"});
        c
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.metadata, c.metadata);
        for ((n1, t1), (n2, t2)) in c.arrays.iter().zip(&back.arrays) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = Container::new();
        c.push("x", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(c.push("x", Tensor::zeros(&[1])), Err(Error::DuplicateName(_))));
    }

    #[test]
    fn corrupted_payload_byte_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Checksum(_))));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(Container::from_bytes(cut), Err(Error::Truncated { .. })));
        assert!(matches!(Container::from_bytes(&bytes[..10]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn newer_major_version_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut manifest: Manifest = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        manifest.format_version.major = FORMAT_MAJOR + 1;
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + len..]);
        assert!(matches!(Container::from_bytes(&out), Err(Error::Version { .. })));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = sample();
        save_container(&path, &c).unwrap();
        assert_eq!(load_container(&path).unwrap(), c);
    }
}
