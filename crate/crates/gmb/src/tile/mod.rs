//! Raster-to-patch pipeline.
//!
//! Converts desk-scale rasters (PNG plus a JSON resolution sidecar) into
//! fixed-size tissue patches: threshold tissue segmentation, pyramid level
//! selection, Lanczos downsampling, grid extraction with configurable
//! overlap, and a self-describing binary record container with one file per
//! WSI. The eight dihedral transforms used for augmentation and test-time
//! augmentation also live here.

mod dihedral;
mod grid;
mod image;
mod lanczos;
mod mask;
mod records;

pub use dihedral::dihedral_transform;
pub use grid::extract_patch_grid;
pub use image::{load_pyramid, LevelEntry, PyramidSidecar, RasterPyramid, RgbImage};
pub use lanczos::resample_lanczos;
pub use mask::{segment_tissue_threshold, ThresholdParams, TissueMask};
pub use records::{read_patch_records, write_patch_records, PatchRecord, PatchRecordFile};

#[derive(Debug, thiserror::Error)]
pub enum TileError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("png error on {path}: {message}")]
    Png { path: String, message: String },
    #[error("sidecar error on {path}: {message}")]
    Sidecar { path: String, message: String },
    #[error("pyramid must have at least one level with strictly increasing pixel sizes")]
    BadPyramid,
    #[error("requested {requested} um/px is finer than the finest level ({finest} um/px)")]
    Resolution { requested: f64, finest: f64 },
    #[error("lanczos resampling never upsamples (src {src} um/px, dst {dst} um/px)")]
    Upsample { src: f64, dst: f64 },
    #[error("patch grid needs edge_px > overlap_px >= 0 (edge {edge}, overlap {overlap})")]
    BadGrid { edge: u16, overlap: u16 },
    #[error("dihedral op index {0} out of range 0..=7")]
    DihedralIndex(u8),
    #[error("dihedral transforms require square patches ({w}x{h})")]
    NotSquare { w: u32, h: u32 },
    #[error("record file {path}: bad magic")]
    BadMagic { path: String },
    #[error("record file {path}: unsupported version {version}")]
    BadVersion { path: String, version: u16 },
    #[error("record file {path}: payload length {actual} does not match header count {expected}")]
    CountMismatch {
        path: String,
        expected: u64,
        actual: u64,
    },
    #[error("empty raster")]
    EmptyRaster,
}
