//! Versioned binary checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "SRCKPT\0\0"
//! 8       4     format version (u32), currently 1
//! 12      8     header length H (u64)
//! 20      H     header JSON (kind, extra, param names + shapes)
//! 20+H    ...   payload: f64 LE values of each param, header order
//! end-4   4     CRC32 of everything before it
//! ```

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SRCKPT\0\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    EncoderBundle,
    Classifier,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: ContainerKind,
    extra: serde_json::Value,
    params: Vec<ParamInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    rows: usize,
    cols: usize,
}

/// In-memory form of a checkpoint: a kind tag, arbitrary JSON metadata, and
/// named parameter matrices.
#[derive(Debug)]
pub struct Container {
    pub kind: ContainerKind,
    pub extra: serde_json::Value,
    pub params: Vec<(String, Array2<f64>)>,
}

pub fn save_container(container: &Container, path: &std::path::Path) -> Result<()> {
    let header = Header {
        kind: container.kind,
        extra: container.extra.clone(),
        params: container
            .params
            .iter()
            .map(|(name, value)| ParamInfo {
                name: name.clone(),
                rows: value.nrows(),
                cols: value.ncols(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for (_, value) in &container.params {
        for v in value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_container(path: &std::path::Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 24 {
        return Err(Error::Checkpoint(format!(
            "file too short ({} bytes) to be a checkpoint",
            bytes.len()
        )));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let actual_crc = crc32fast::hash(body);
    if stored_crc != actual_crc {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch (stored {stored_crc:08x}, computed {actual_crc:08x}); file is corrupt or truncated"
        )));
    }
    if &body[0..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {FORMAT_VERSION}); no silent migration"
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    if body.len() < 20 + header_len {
        return Err(Error::Checkpoint("header extends past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&body[20..20 + header_len])?;

    let mut offset = 20 + header_len;
    let mut params = Vec::with_capacity(header.params.len());
    for info in &header.params {
        let n = info.rows * info.cols;
        let end = offset + n * 8;
        if body.len() < end {
            return Err(Error::Checkpoint(format!(
                "payload for `{}` extends past end of file",
                info.name
            )));
        }
        let mut values = Vec::with_capacity(n);
        for chunk in body[offset..end].chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let array = Array2::from_shape_vec((info.rows, info.cols), values)
            .map_err(|e| Error::Checkpoint(format!("shape error for `{}`: {e}", info.name)))?;
        params.push((info.name.clone(), array));
        offset = end;
    }
    if offset != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last parameter",
            body.len() - offset
        )));
    }
    Ok(Container {
        kind: header.kind,
        extra: header.extra,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> Container {
        Container {
            kind: ContainerKind::EncoderBundle,
            extra: serde_json::json!({"d": 4}),
            params: vec![
                ("a".into(), array![[1.0, 2.0], [3.0, 4.0]]),
                ("b".into(), array![[-0.5]]),
            ],
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_container(&sample(), &path).unwrap();
        let loaded = load_container(&path).unwrap();
        assert_eq!(loaded.kind, ContainerKind::EncoderBundle);
        assert_eq!(loaded.params.len(), 2);
        assert_eq!(loaded.params[0].1, array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(loaded.params[1].1, array![[-0.5]]);
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_container(&sample(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_container(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_container(&sample(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = load_container(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
