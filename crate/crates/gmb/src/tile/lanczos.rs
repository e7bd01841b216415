//! Lanczos-3 windowed-sinc downsampling.
//!
//! The pipeline only ever reduces resolution, so the kernel is stretched by
//! the inverse scale (the standard anti-aliasing form) and applied
//! separably, horizontal then vertical. Weights are renormalized per output
//! pixel, which keeps constant regions constant and handles the clamped
//! borders.

use super::image::RgbImage;
use super::TileError;

const LOBES: f64 = 3.0;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// The Lanczos-3 kernel value at offset `t` (in output-scaled units).
pub(crate) fn lanczos3(t: f64) -> f64 {
    if t.abs() >= LOBES {
        0.0
    } else {
        sinc(t) * sinc(t / LOBES)
    }
}

struct Taps {
    // Per output index: (first source index, weights)
    entries: Vec<(i64, Vec<f64>)>,
}

fn build_taps(src_len: u32, dst_len: u32, scale: f64) -> Taps {
    let radius = LOBES / scale;
    let mut entries = Vec::with_capacity(dst_len as usize);
    for i in 0..dst_len {
        let center = (i as f64 + 0.5) / scale - 0.5;
        let lo = (center - radius).ceil() as i64;
        let hi = (center + radius).floor() as i64;
        let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
        let mut sum = 0.0;
        for j in lo..=hi {
            let w = lanczos3((j as f64 - center) * scale);
            sum += w;
            weights.push(w);
        }
        for w in &mut weights {
            *w /= sum;
        }
        let _ = src_len;
        entries.push((lo, weights));
    }
    Taps { entries }
}

#[inline]
fn clamp_index(j: i64, len: u32) -> usize {
    j.clamp(0, len as i64 - 1) as usize
}

/// Downsample `src` from `src_um` to `dst_um` per pixel. `dst_um == src_um`
/// is the identity; `dst_um < src_um` (upsampling) is an error.
#[allow(clippy::needless_range_loop)]
pub fn resample_lanczos(src: &RgbImage, src_um: f64, dst_um: f64) -> Result<RgbImage, TileError> {
    if src.width == 0 || src.height == 0 {
        return Err(TileError::EmptyRaster);
    }
    if dst_um < src_um * (1.0 - 1e-12) {
        return Err(TileError::Upsample {
            src: src_um,
            dst: dst_um,
        });
    }
    let scale = src_um / dst_um;
    if (scale - 1.0).abs() <= 1e-12 {
        return Ok(src.clone());
    }
    let out_w = ((src.width as f64 * scale).round() as u32).max(1);
    let out_h = ((src.height as f64 * scale).round() as u32).max(1);

    // Horizontal pass into an f64 intermediate, then vertical pass.
    let h_taps = build_taps(src.width, out_w, scale);
    let mut mid = vec![0.0f64; out_w as usize * src.height as usize * 3];
    for y in 0..src.height as usize {
        let row = &src.pixels[y * src.width as usize * 3..(y + 1) * src.width as usize * 3];
        for (xo, (lo, weights)) in h_taps.entries.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for (k, w) in weights.iter().enumerate() {
                let xs = clamp_index(lo + k as i64, src.width);
                acc[0] += w * row[3 * xs] as f64;
                acc[1] += w * row[3 * xs + 1] as f64;
                acc[2] += w * row[3 * xs + 2] as f64;
            }
            let base = (y * out_w as usize + xo) * 3;
            mid[base] = acc[0];
            mid[base + 1] = acc[1];
            mid[base + 2] = acc[2];
        }
    }

    let v_taps = build_taps(src.height, out_h, scale);
    let mut out = RgbImage::new(out_w, out_h);
    for (yo, (lo, weights)) in v_taps.entries.iter().enumerate() {
        for xo in 0..out_w as usize {
            let mut acc = [0.0f64; 3];
            for (k, w) in weights.iter().enumerate() {
                let ys = clamp_index(lo + k as i64, src.height);
                let base = (ys * out_w as usize + xo) * 3;
                acc[0] += w * mid[base];
                acc[1] += w * mid[base + 1];
                acc[2] += w * mid[base + 2];
            }
            let base = (yo * out_w as usize + xo) * 3;
            for c in 0..3 {
                out.pixels[base + c] = acc[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}
