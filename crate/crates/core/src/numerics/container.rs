//! Named-tensor container file.
//!
//! Layout:
//!
//! ```text
//! magic     8 bytes   "RTDTENS\0"
//! version   u32 LE
//! length    u64 LE    byte length of the manifest
//! manifest  JSON      {"metadata": .., "tensors": [{"name", "shape", "offset"}]}
//! payload   f32 LE    tensors back to back; offsets are relative to payload start
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

pub const CONTAINER_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RTDTENS\0";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a tensor container (bad magic)")]
    BadMagic,
    #[error("container format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    metadata: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// Decoded container: free-form metadata plus ordered named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_container<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
    metadata: &serde_json::Value,
) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.numel() as u64;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        metadata: metadata.clone(),
        tensors: entries,
    })
    .expect("manifest serializes");

    let mut out = Vec::with_capacity(20 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in &tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_container(bytes: &[u8]) -> Result<Container, ContainerError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(ContainerError::VersionMismatch {
            found: version,
            expected: CONTAINER_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if len > body.len() {
        return Err(ContainerError::CorruptManifest(format!(
            "manifest length {len} exceeds file size"
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len])
        .map_err(|e| ContainerError::CorruptManifest(e.to_string()))?;
    let payload = &body[len..];

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(ContainerError::CorruptManifest(format!(
                "tensor `{}` extends past the payload",
                e.name
            )));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| ContainerError::CorruptManifest(err.to_string()))?;
        tensors.push((e.name, t));
    }
    Ok(Container {
        metadata: manifest.metadata,
        tensors,
    })
}

pub fn write_container<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
    metadata: &serde_json::Value,
) -> Result<(), ContainerError> {
    let bytes = encode_container(tensors, metadata);
    fs::write(path, bytes).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_container(path: &Path) -> Result<Container, ContainerError> {
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    proptest! {
        #[test]
        fn encode_decode_round_trips(
            shapes in proptest::collection::vec(proptest::collection::vec(0usize..4, 0..3), 0..4),
            seed in any::<u32>(),
        ) {
            let tensors: Vec<(String, Tensor<f32>)> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let t = Tensor::from_fn(s, |j| ((seed as usize + i * 31 + j) % 97) as f32 * 0.25 - 3.0);
                    (format!("t{i}"), t)
                })
                .collect();
            let meta = json!({"step": seed});
            let bytes = encode_container(tensors.iter().map(|(n, t)| (n.as_str(), t)), &meta);
            let back = decode_container(&bytes).unwrap();
            prop_assert_eq!(&back.metadata, &meta);
            prop_assert_eq!(&back.tensors, &tensors);
            let again = encode_container(back.tensors.iter().map(|(n, t)| (n.as_str(), t)), &back.metadata);
            prop_assert_eq!(again, bytes);
        }
    }

    #[test]
    fn header_is_little_endian_versioned() {
        let t = Tensor::new(&[1], vec![1.0f32]).unwrap();
        let bytes = encode_container([("x", &t)], &json!(null));
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), CONTAINER_VERSION);
        assert_eq!(&bytes[bytes.len() - 4..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn wrong_version_is_reported() {
        let t = Tensor::new(&[1], vec![1.0f32]).unwrap();
        let mut bytes = encode_container([("x", &t)], &json!(null));
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_container(&bytes),
            Err(ContainerError::VersionMismatch { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let t = Tensor::new(&[4], vec![1.0f32; 4]).unwrap();
        let bytes = encode_container([("x", &t)], &json!(null));
        assert!(matches!(
            decode_container(&bytes[..bytes.len() - 2]),
            Err(ContainerError::CorruptManifest(_))
        ));
        assert!(matches!(decode_container(b"nope"), Err(ContainerError::BadMagic)));
    }
}
