//! Grid extraction of fixed-size tissue patches.

use super::image::RasterPyramid;
use super::lanczos::resample_lanczos;
use super::mask::TissueMask;
use super::records::{PatchRecord, PatchRecordFile};
use super::TileError;

/// Extract every grid window whose tissue fraction meets the threshold.
///
/// The grid starts at (0, 0) of the target-resolution frame with stride
/// `edge_px - overlap_px`; windows extending past the border are discarded.
/// Pixels come from Lanczos downsampling of the closest pyramid level at or
/// below the requested pixel size; the mask is rescaled to the target frame
/// by nearest neighbor.
pub fn extract_patch_grid(
    pyramid: &RasterPyramid,
    mask: &TissueMask,
    edge_px: u16,
    target_um_per_px: f64,
    overlap_px: u16,
    min_tissue_fraction: f64,
) -> Result<PatchRecordFile, TileError> {
    if edge_px == 0 || overlap_px >= edge_px {
        return Err(TileError::BadGrid {
            edge: edge_px,
            overlap: overlap_px,
        });
    }
    let (level_img, level_um) = pyramid.closest_source_level(target_um_per_px)?;
    let frame = resample_lanczos(level_img, *level_um, target_um_per_px)?;

    let edge = edge_px as u32;
    let stride = (edge_px - overlap_px) as u32;
    let window_px = edge as u64 * edge as u64;

    // Nearest-neighbor lookup from target-frame coordinates into the mask.
    let sx = mask.width as f64 / frame.width as f64;
    let sy = mask.height as f64 / frame.height as f64;
    let mask_at = |x: u32, y: u32| -> bool {
        let mx = (((x as f64 + 0.5) * sx) as u32).min(mask.width - 1);
        let my = (((y as f64 + 0.5) * sy) as u32).min(mask.height - 1);
        mask.get(mx, my)
    };

    let mut patches = Vec::new();
    if frame.width >= edge && frame.height >= edge {
        let mut y0 = 0u32;
        while y0 + edge <= frame.height {
            let mut x0 = 0u32;
            while x0 + edge <= frame.width {
                let mut tissue = 0u64;
                for y in y0..y0 + edge {
                    for x in x0..x0 + edge {
                        tissue += mask_at(x, y) as u64;
                    }
                }
                let fraction = tissue as f64 / window_px as f64;
                if fraction >= min_tissue_fraction - 1e-12 {
                    let img = frame.crop(x0, y0, edge, edge);
                    patches.push(PatchRecord {
                        x: x0,
                        y: y0,
                        pixels: img.pixels,
                    });
                }
                x0 += stride;
            }
            y0 += stride;
        }
    }

    Ok(PatchRecordFile {
        patch_edge_px: edge_px,
        pixel_size_um: target_um_per_px as f32,
        patches,
    })
}
