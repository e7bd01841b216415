//! 8-bit RGB rasters, PNG IO and the resolution-pyramid sidecar.

use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TileError;

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![0; (width as usize) * (height as usize) * 3],
        }
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut img = RgbImage::new(width, height);
        for px in img.pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy a `w`x`h` window with top-left corner at (x0, y0); the window
    /// must lie inside the image.
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> RgbImage {
        assert!(x0 + w <= self.width && y0 + h <= self.height);
        let mut out = RgbImage::new(w, h);
        for y in 0..h {
            let src_start = 3 * ((y0 + y) as usize * self.width as usize + x0 as usize);
            let dst_start = 3 * (y as usize * w as usize);
            out.pixels[dst_start..dst_start + 3 * w as usize]
                .copy_from_slice(&self.pixels[src_start..src_start + 3 * w as usize]);
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<(), TileError> {
        let file = std::fs::File::create(path).map_err(|source| TileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width, self.height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| TileError::Png {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        writer
            .write_image_data(&self.pixels)
            .map_err(|e| TileError::Png {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }

    pub fn load_png(path: &Path) -> Result<Self, TileError> {
        let file = std::fs::File::open(path).map_err(|source| TileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| TileError::Png {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| TileError::Png {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(TileError::Png {
                path: path.display().to_string(),
                message: format!(
                    "expected 8-bit RGB, got {:?}/{:?}",
                    info.color_type, info.bit_depth
                ),
            });
        }
        buf.truncate(info.buffer_size());
        Ok(RgbImage {
            width: info.width,
            height: info.height,
            pixels: buf,
        })
    }
}

/// One entry of the resolution sidecar: a PNG file and its pixel size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelEntry {
    pub file: String,
    pub pixel_size_um: f64,
}

/// JSON sidecar describing the levels of a raster pyramid. Paths are
/// relative to the sidecar's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PyramidSidecar {
    pub levels: Vec<LevelEntry>,
}

/// An in-memory pyramid: levels ordered by strictly increasing pixel size.
#[derive(Debug, Clone)]
pub struct RasterPyramid {
    pub levels: Vec<(RgbImage, f64)>,
}

impl RasterPyramid {
    pub fn from_levels(mut levels: Vec<(RgbImage, f64)>) -> Result<Self, TileError> {
        if levels.is_empty() || levels.iter().any(|(_, um)| !um.is_finite() || *um <= 0.0) {
            return Err(TileError::BadPyramid);
        }
        levels.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        for pair in levels.windows(2) {
            let coarser_is_smaller =
                pair[1].0.width <= pair[0].0.width && pair[1].0.height <= pair[0].0.height;
            if pair[1].1 <= pair[0].1 || !coarser_is_smaller {
                return Err(TileError::BadPyramid);
            }
        }
        Ok(RasterPyramid { levels })
    }

    /// Pixel size of the finest level.
    pub fn finest_um(&self) -> f64 {
        self.levels[0].1
    }

    /// The closest level at or above the requested resolution, i.e. the
    /// coarsest level whose pixel size does not exceed `target_um`.
    pub fn closest_source_level(&self, target_um: f64) -> Result<&(RgbImage, f64), TileError> {
        self.levels
            .iter()
            .rev()
            .find(|(_, um)| *um <= target_um * (1.0 + 1e-9))
            .ok_or(TileError::Resolution {
                requested: target_um,
                finest: self.finest_um(),
            })
    }
}

/// Load a pyramid from a sidecar JSON path.
pub fn load_pyramid(sidecar_path: &Path) -> Result<RasterPyramid, TileError> {
    let text = std::fs::read_to_string(sidecar_path).map_err(|source| TileError::Io {
        path: sidecar_path.display().to_string(),
        source,
    })?;
    let sidecar: PyramidSidecar = serde_json::from_str(&text).map_err(|e| TileError::Sidecar {
        path: sidecar_path.display().to_string(),
        message: e.to_string(),
    })?;
    let dir = sidecar_path.parent().unwrap_or_else(|| Path::new("."));
    let mut levels = Vec::with_capacity(sidecar.levels.len());
    for entry in &sidecar.levels {
        let img = RgbImage::load_png(&dir.join(&entry.file))?;
        levels.push((img, entry.pixel_size_um));
    }
    RasterPyramid::from_levels(levels)
}
