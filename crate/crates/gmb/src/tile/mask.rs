//! Threshold tissue segmentation.
//!
//! A deterministic stand-in for a learned segmentation network: a pixel
//! counts as tissue when its HSV saturation is at least `s_min` and its
//! luma is at most `l_max`, both on the unit range. Stained tissue is
//! saturated and darker than the white slide background, which has
//! saturation near zero and luma near one.

use super::image::RgbImage;
use super::TileError;

#[derive(Debug, Clone, Copy)]
pub struct ThresholdParams {
    pub s_min: f64,
    pub l_max: f64,
}

impl ThresholdParams {
    pub fn default_s_min() -> f64 {
        0.05
    }

    pub fn default_l_max() -> f64 {
        0.95
    }
}

impl Default for ThresholdParams {
    fn default() -> Self {
        ThresholdParams {
            s_min: Self::default_s_min(),
            l_max: Self::default_l_max(),
        }
    }
}

/// Binary tissue mask with the pixel size of the raster it was computed from.
#[derive(Debug, Clone)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    pub pixel_size_um: f64,
    pub data: Vec<bool>,
}

impl TissueMask {
    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn tissue_fraction(&self) -> f64 {
        let tissue = self.data.iter().filter(|&&b| b).count();
        tissue as f64 / self.data.len() as f64
    }
}

/// Segment tissue from a raster (conventionally rendered at 8.0 um/px).
pub fn segment_tissue_threshold(
    raster: &RgbImage,
    pixel_size_um: f64,
    params: ThresholdParams,
) -> Result<TissueMask, TileError> {
    if raster.width == 0 || raster.height == 0 {
        return Err(TileError::EmptyRaster);
    }
    let mut data = Vec::with_capacity(raster.pixels.len() / 3);
    for px in raster.pixels.chunks_exact(3) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let saturation = if max > 0.0 { (max - min) / max } else { 0.0 };
        let luma = (0.299 * r + 0.587 * g + 0.114 * b) / 255.0;
        data.push(saturation >= params.s_min && luma <= params.l_max);
    }
    Ok(TissueMask {
        width: raster.width,
        height: raster.height,
        pixel_size_um,
        data,
    })
}
