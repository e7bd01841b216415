//! Frozen-embedding file interface.
//!
//! Stand-in for running a large pretrained patch encoder: embeddings are
//! precomputed and stored per WSI. Layout (little-endian): magic "GEM1";
//! u16 version = 1; u32 embed_dim; u32 count; then `count` records of
//! (32-byte lowercase hex patch key, f32 * embed_dim).
//!
//! Patch keys are derived from the patch origin within its WSI frame, so a
//! record file and an embedding file for the same WSI line up by key.

use std::io::{Read, Write};
use std::path::Path;

use super::linalg::Matrix;
use super::ModelError;
use crate::md5::md5_hex;

pub const MAGIC: [u8; 4] = *b"GEM1";
pub const VERSION: u16 = 1;

/// WSI-local key for the patch at target-frame origin (x, y).
pub fn patch_key(x: u32, y: u32) -> String {
    md5_hex(format!("{x}|{y}").as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub embed_dim: usize,
    pub entries: Vec<(String, Vec<f32>)>,
}

impl EmbeddingFile {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, key: &str) -> Option<&[f32]> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
    }

    /// All embeddings as a bag matrix, in file order.
    pub fn to_matrix(&self) -> Matrix<f32> {
        let mut data = Vec::with_capacity(self.len() * self.embed_dim);
        for (_, row) in &self.entries {
            data.extend_from_slice(row);
        }
        Matrix::from_vec(self.len(), self.embed_dim, data)
    }
}

pub fn write_embeddings(path: &Path, file: &EmbeddingFile) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let io_err = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(io_err);
    write(&MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(file.embed_dim as u32).to_le_bytes())?;
    write(&(file.entries.len() as u32).to_le_bytes())?;
    for (key, row) in &file.entries {
        debug_assert_eq!(key.len(), 32);
        debug_assert_eq!(row.len(), file.embed_dim);
        write(key.as_bytes())?;
        for v in row {
            write(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?
        .read_to_end(&mut bytes)
        .map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let display = path.display().to_string();
    let format_err = |message: String| ModelError::Format {
        path: display.clone(),
        message,
    };
    if bytes.len() < 14 || bytes[0..4] != MAGIC {
        return Err(format_err("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let embed_dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let record = 32 + embed_dim * 4;
    if bytes.len() != 14 + count * record {
        return Err(format_err(format!(
            "payload length {} does not match count {count}",
            bytes.len() - 14
        )));
    }
    let mut entries = Vec::with_capacity(count);
    let mut off = 14usize;
    for _ in 0..count {
        let key = std::str::from_utf8(&bytes[off..off + 32])
            .map_err(|_| ModelError::Format {
                path: display.clone(),
                message: "non-utf8 patch key".into(),
            })?
            .to_string();
        off += 32;
        let mut row = Vec::with_capacity(embed_dim);
        for _ in 0..embed_dim {
            row.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        entries.push((key, row));
    }
    Ok(EmbeddingFile { embed_dim, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.gem");
        let file = EmbeddingFile {
            embed_dim: 3,
            entries: vec![
                (patch_key(0, 0), vec![1.0, -2.0, 0.5]),
                (patch_key(32, 0), vec![0.0, 0.25, 9.0]),
            ],
        };
        write_embeddings(&path, &file).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.lookup(&patch_key(32, 0)).unwrap()[2], 9.0);
        assert_eq!(back.lookup(&patch_key(1, 1)), None);
        assert_eq!(back.to_matrix().rows, 2);
    }

    #[test]
    fn keys_are_origin_sensitive_hex() {
        let a = patch_key(0, 128);
        let b = patch_key(128, 0);
        assert_ne!(a, b);
        assert_eq!(a.len(), 32);
        assert!(a.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.gem");
        let file = EmbeddingFile {
            embed_dim: 2,
            entries: vec![(patch_key(0, 0), vec![1.0, 2.0])],
        };
        write_embeddings(&path, &file).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_embeddings(&path).is_err());
    }
}
