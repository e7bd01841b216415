//! Versioned binary checkpoint of the trainable tensors.
//!
//! Layout (little-endian): magic "GMC1"; u16 version = 1; u8 encoder mode
//! (0 frozen, 1 toy); u32 embed_dim; u32 tensor count; then per tensor:
//! u16 name length, name bytes, u32 rows, u32 cols, rows*cols f32 values.
//! The shape table is validated against the architecture on load.

use std::io::{Read, Write};
use std::path::Path;

use super::params::{init_params, EncoderMode, EncoderSpec, MilParams};
use super::ModelError;

pub const MAGIC: [u8; 4] = *b"GMC1";
pub const VERSION: u16 = 1;

pub fn write_checkpoint(path: &Path, params: &MilParams<f32>) -> Result<(), ModelError> {
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
    write(&[match params.spec.mode {
        EncoderMode::FrozenFile => 0u8,
        EncoderMode::TrainableToy => 1u8,
    }])?;
    write(&(params.spec.embed_dim as u32).to_le_bytes())?;
    let names = params.tensor_names();
    write(&(names.len() as u32).to_le_bytes())?;
    for name in names {
        let (rows, cols) = params.tensor_shape(name);
        write(&(name.len() as u16).to_le_bytes())?;
        write(name.as_bytes())?;
        write(&(rows as u32).to_le_bytes())?;
        write(&(cols as u32).to_le_bytes())?;
        for v in params.tensor(name) {
            write(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<MilParams<f32>, ModelError> {
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

    if bytes.len() < 15 || bytes[0..4] != MAGIC {
        return Err(format_err("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let mode = match bytes[6] {
        0 => EncoderMode::FrozenFile,
        1 => EncoderMode::TrainableToy,
        other => return Err(format_err(format!("unknown encoder mode {other}"))),
    };
    let embed_dim = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let n_tensors = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;

    let spec = EncoderSpec { mode, embed_dim };
    let mut params: MilParams<f32> = init_params(&spec, 0);
    let expected = params.tensor_names();
    if n_tensors != expected.len() {
        return Err(format_err(format!(
            "tensor count {n_tensors}, architecture has {}",
            expected.len()
        )));
    }

    let mut off = 15usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        if *off + n > bytes.len() {
            return Err(ModelError::Format {
                path: display.clone(),
                message: "truncated".into(),
            });
        }
        let slice = &bytes[*off..*off + n];
        *off += n;
        Ok(slice)
    };
    for expected_name in expected {
        let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut off, name_len)?)
            .map_err(|_| ModelError::Format {
                path: display.clone(),
                message: "non-utf8 tensor name".into(),
            })?
            .to_string();
        if name != expected_name {
            return Err(format_err(format!(
                "tensor order mismatch: expected {expected_name}, found {name}"
            )));
        }
        let rows = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        if (rows, cols) != params.tensor_shape(expected_name) {
            return Err(format_err(format!(
                "shape mismatch for {expected_name}: file has {rows}x{cols}"
            )));
        }
        let raw = take(&mut off, rows * cols * 4)?;
        let dst = params.tensor_mut(expected_name);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            dst[i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if off != bytes.len() {
        return Err(format_err("trailing bytes after tensor table".into()));
    }
    Ok(params)
}
