//! Binary patch record container, one file per WSI.
//!
//! Layout (all little-endian): magic "GPR1"; u16 version = 1; u16
//! patch_edge_px; f32 pixel_size_um; u32 count; then `count` records of
//! (u32 x, u32 y, edge*edge*3 bytes RGB).

use std::io::{Read, Write};
use std::path::Path;

use super::image::RgbImage;
use super::TileError;

pub const MAGIC: [u8; 4] = *b"GPR1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRecord {
    pub x: u32,
    pub y: u32,
    pub pixels: Vec<u8>,
}

impl PatchRecord {
    pub fn to_image(&self, edge: u16) -> RgbImage {
        RgbImage {
            width: edge as u32,
            height: edge as u32,
            pixels: self.pixels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecordFile {
    pub patch_edge_px: u16,
    pub pixel_size_um: f32,
    pub patches: Vec<PatchRecord>,
}

impl PatchRecordFile {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

pub fn write_patch_records(path: &Path, file: &PatchRecordFile) -> Result<(), TileError> {
    let io_err = |source| TileError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let io_err = |source| TileError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(io_err);
    write(&MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&file.patch_edge_px.to_le_bytes())?;
    write(&file.pixel_size_um.to_le_bytes())?;
    write(&(file.patches.len() as u32).to_le_bytes())?;
    let payload = file.patch_edge_px as usize * file.patch_edge_px as usize * 3;
    for patch in &file.patches {
        debug_assert_eq!(patch.pixels.len(), payload);
        write(&patch.x.to_le_bytes())?;
        write(&patch.y.to_le_bytes())?;
        write(&patch.pixels)?;
    }
    Ok(())
}

pub fn read_patch_records(path: &Path) -> Result<PatchRecordFile, TileError> {
    let io_err = |source| TileError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(|source| TileError::Io {
            path: path.display().to_string(),
            source,
        })?;

    let display = path.display().to_string();
    if bytes.len() < 16 || bytes[0..4] != MAGIC {
        return Err(TileError::BadMagic { path: display });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(TileError::BadVersion {
            path: display,
            version,
        });
    }
    let edge = u16::from_le_bytes([bytes[6], bytes[7]]);
    let um = f32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    let count = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as u64;
    let payload = edge as u64 * edge as u64 * 3;
    let expected = 16 + count * (8 + payload);
    if bytes.len() as u64 != expected {
        return Err(TileError::CountMismatch {
            path: display,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut patches = Vec::with_capacity(count as usize);
    let mut off = 16usize;
    for _ in 0..count {
        let x = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let y = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
        off += 8;
        let pixels = bytes[off..off + payload as usize].to_vec();
        off += payload as usize;
        patches.push(PatchRecord { x, y, pixels });
    }
    Ok(PatchRecordFile {
        patch_edge_px: edge,
        pixel_size_um: um,
        patches,
    })
}
