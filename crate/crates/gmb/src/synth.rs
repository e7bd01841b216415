//! Synthetic desk-scale cohort generator.
//!
//! Produces rasters whose patch cells carry class-determined colors for
//! the four pattern classes, per-scanner color shifts emulating scanner
//! variation, a valid manifest with stratified CV folds, and frozen
//! "oracle" embeddings (class-informative vectors plus noise) for
//! frozen-encoder experiments. Slide labels follow the painted content:
//! primary = most frequent non-benign class, secondary = second most
//! frequent; benign slides contain only benign tissue.
//!
//! The generator tiles its own rasters through the real pipeline so that
//! embedding files line up key-for-key with the patch record files any
//! later `tile` run produces.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::grading::{decode_gs_ordinal, gs_to_isup, GleasonScore, GsOrdinal};
use crate::manifest::{make_cv_folds, CohortManifest, ManifestError, ManifestRow};
use crate::model::{patch_key, write_embeddings, EmbeddingFile, ModelError};
use crate::tile::{
    extract_patch_grid, segment_tissue_threshold, LevelEntry, PyramidSidecar, RasterPyramid,
    RgbImage, ThresholdParams, TileError,
};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("synth config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn default_mixture() -> Vec<f64> {
    // Weights over the ten score ordinals: benign through 5+5.
    vec![0.30, 0.15, 0.15, 0.10, 0.02, 0.08, 0.02, 0.08, 0.05, 0.05]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// How many of the patients form the held-out internal validation set.
    pub n_validation_patients: usize,
    pub n_scanners: usize,
    #[serde(default = "default_one")]
    pub slides_per_patient: usize,
    /// Weights over the ten score ordinals (benign, 3+3, ..., 5+5).
    #[serde(default = "default_mixture")]
    pub grade_mixture: Vec<f64>,
    #[serde(default = "default_edge")]
    pub patch_edge_px: u16,
    /// Patch cells per slide, (columns, rows).
    #[serde(default = "default_grid")]
    pub grid: (u32, u32),
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Fraction of development slides additionally scanned on a second
    /// scanner (scanner augmentation material).
    #[serde(default = "default_rescan")]
    pub rescan_fraction: f64,
    /// Fraction of cells left as white background.
    #[serde(default = "default_background")]
    pub background_fraction: f64,
    #[serde(default = "default_folds")]
    pub cv_folds: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_one() -> usize {
    1
}
fn default_edge() -> u16 {
    16
}
fn default_grid() -> (u32, u32) {
    (3, 3)
}
fn default_embed_dim() -> usize {
    16
}
fn default_rescan() -> f64 {
    0.1
}
fn default_background() -> f64 {
    0.1
}
fn default_folds() -> u32 {
    10
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 40,
            n_validation_patients: 10,
            n_scanners: 2,
            slides_per_patient: default_one(),
            grade_mixture: default_mixture(),
            patch_edge_px: default_edge(),
            grid: default_grid(),
            embed_dim: default_embed_dim(),
            rescan_fraction: default_rescan(),
            background_fraction: default_background(),
            cv_folds: default_folds(),
            seed: 0,
        }
    }
}

/// Output locations for a generated cohort.
#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub raster_dir: PathBuf,
    pub embed_dir: PathBuf,
    pub truth_dir: PathBuf,
    pub manifest_path: PathBuf,
}

impl SynthPaths {
    pub fn under(root: &Path) -> Self {
        SynthPaths {
            raster_dir: root.join("rasters"),
            embed_dir: root.join("embeddings"),
            truth_dir: root.join("truth"),
            manifest_path: root.join("manifest.csv"),
        }
    }
}

/// Mean colors per pattern class (benign, 3, 4, 5): progressively darker
/// and more saturated stain tones.
const CLASS_COLORS: [[f64; 3]; 4] = [
    [231.0, 185.0, 205.0],
    [205.0, 130.0, 170.0],
    [160.0, 85.0, 140.0],
    [105.0, 45.0, 100.0],
];

fn scanner_shift(scanner: usize) -> [f64; 3] {
    // Deterministic small RGB offset per scanner index.
    let k = scanner as f64 + 1.0;
    [
        8.0 * ((k * 1.3).sin()),
        8.0 * ((k * 2.1).cos()),
        8.0 * ((k * 0.7).sin()),
    ]
}

/// Class layout of one slide's grid: None = background, Some(code).
fn plan_cells(
    score: GleasonScore,
    grid: (u32, u32),
    background_fraction: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<Option<u8>> {
    let total = (grid.0 * grid.1) as usize;
    let n_background = ((total as f64 * background_fraction) as usize).min(total.saturating_sub(1));
    let n_tissue = total - n_background;
    let mut cells: Vec<Option<u8>> = Vec::with_capacity(total);

    if score.is_benign() {
        cells.extend(std::iter::repeat_n(Some(0u8), n_tissue));
    } else {
        let p = score.primary().code();
        let s = score.secondary().code();
        if p == s {
            // Pure pattern: most of the tissue is the pattern itself.
            let n_pattern = ((n_tissue as f64) * 0.9).ceil() as usize;
            let n_pattern = n_pattern.clamp(1, n_tissue);
            cells.extend(std::iter::repeat_n(Some(p), n_pattern));
            cells.extend(std::iter::repeat_n(Some(0u8), n_tissue - n_pattern));
        } else {
            let mut n_primary = ((n_tissue as f64) * 0.55).ceil() as usize;
            let mut n_secondary = ((n_tissue as f64) * 0.30).ceil() as usize;
            // The primary class must strictly dominate.
            while n_primary + n_secondary > n_tissue {
                n_secondary = n_secondary.saturating_sub(1).max(1);
                if n_primary + n_secondary > n_tissue {
                    n_primary -= 1;
                }
            }
            if n_primary <= n_secondary {
                n_primary = (n_secondary + 1).min(n_tissue - n_secondary);
            }
            cells.extend(std::iter::repeat_n(Some(p), n_primary));
            cells.extend(std::iter::repeat_n(Some(s), n_secondary));
            cells.extend(std::iter::repeat_n(
                Some(0u8),
                n_tissue - n_primary - n_secondary,
            ));
        }
    }
    cells.extend(std::iter::repeat_n(None, n_background));
    cells.shuffle(rng);
    cells
}

fn paint_raster(
    cells: &[Option<u8>],
    grid: (u32, u32),
    edge: u16,
    scanner: usize,
    rng: &mut ChaCha12Rng,
) -> RgbImage {
    let (gw, gh) = grid;
    let e = edge as u32;
    let mut img = RgbImage::filled(gw * e, gh * e, [255, 255, 255]);
    let shift = scanner_shift(scanner);
    for cy in 0..gh {
        for cx in 0..gw {
            let Some(class) = cells[(cy * gw + cx) as usize] else {
                continue;
            };
            let mean = CLASS_COLORS[class as usize];
            for y in cy * e..(cy + 1) * e {
                for x in cx * e..(cx + 1) * e {
                    let mut px = [0u8; 3];
                    for c in 0..3 {
                        let noise: f64 = rng.random_range(-12.0..12.0);
                        px[c] = (mean[c] + shift[c] + noise).round().clamp(0.0, 255.0) as u8;
                    }
                    img.set(x, y, px);
                }
            }
        }
    }
    img
}

/// Oracle embedding: a peak at the class dimension, a scanner offset, and
/// enough noise that small training sets visibly underfit.
fn oracle_embedding(
    class: u8,
    scanner: usize,
    embed_dim: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<f32> {
    let mut v: Vec<f32> = (0..embed_dim)
        .map(|_| rng.random_range(-0.9..0.9))
        .collect();
    v[class as usize % embed_dim] += 2.2;
    // Scanner variation occupies later dimensions so it never collides
    // with the class signal on realistic widths.
    if embed_dim > 8 {
        let slot = 4 + scanner % (embed_dim - 4).max(1);
        v[slot] += 1.0;
    }
    v
}

/// Per-WSI ground truth: emitted patch origins mapped to their class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WsiTruth {
    pub patch_edge_px: u16,
    /// "x,y" origin -> pattern class code (0 = benign tissue).
    pub classes: BTreeMap<String, u8>,
}

/// Summary of the generated cohort.
#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub patients: usize,
    pub slides: usize,
    pub wsis: usize,
    pub development_slides: usize,
    pub validation_slides: usize,
}

/// Generate a cohort on disk; bit-identical for a fixed config.
pub fn generate(cfg: &SynthConfig, out: &SynthPaths) -> Result<SynthSummary, SynthError> {
    if cfg.n_patients < 2 {
        return Err(SynthError::Config("n_patients must be >= 2".into()));
    }
    if cfg.n_validation_patients >= cfg.n_patients {
        return Err(SynthError::Config(
            "n_validation_patients must leave at least one development patient".into(),
        ));
    }
    if cfg.grade_mixture.len() != 10 || cfg.grade_mixture.iter().any(|&w| w < 0.0) {
        return Err(SynthError::Config(
            "grade_mixture needs 10 non-negative weights".into(),
        ));
    }
    if cfg.n_scanners == 0 {
        return Err(SynthError::Config("n_scanners must be >= 1".into()));
    }
    if cfg.embed_dim < 4 {
        return Err(SynthError::Config("embed_dim must be >= 4".into()));
    }
    for dir in [&out.raster_dir, &out.embed_dir, &out.truth_dir] {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mixture_total: f64 = cfg.grade_mixture.iter().sum();
    if mixture_total <= 0.0 {
        return Err(SynthError::Config("grade_mixture sums to zero".into()));
    }
    let draw_score = |rng: &mut ChaCha12Rng| -> GleasonScore {
        let mut ticket = rng.random::<f64>() * mixture_total;
        for (ord, &w) in cfg.grade_mixture.iter().enumerate() {
            ticket -= w;
            if ticket <= 0.0 {
                return decode_gs_ordinal(GsOrdinal::new(ord as u8).unwrap());
            }
        }
        decode_gs_ordinal(GsOrdinal::new(9).unwrap())
    };

    let n_dev = cfg.n_patients - cfg.n_validation_patients;
    let mut rows: Vec<ManifestRow> = Vec::new();
    let mut summary = SynthSummary {
        patients: cfg.n_patients,
        slides: 0,
        wsis: 0,
        development_slides: 0,
        validation_slides: 0,
    };

    for patient in 0..cfg.n_patients {
        let development = patient < n_dev;
        let split = if development {
            "development"
        } else {
            "internal_validation"
        };
        for slide_idx in 0..cfg.slides_per_patient {
            let score = draw_score(&mut rng);
            let isup = gs_to_isup(score);
            let cells = plan_cells(score, cfg.grid, cfg.background_fraction, &mut rng);
            summary.slides += 1;
            if development {
                summary.development_slides += 1;
            } else {
                summary.validation_slides += 1;
            }

            let base_scanner = patient % cfg.n_scanners;
            let mut scanners = vec![base_scanner];
            // Rescans only exist in development, where they feed scanner
            // augmentation; validation keeps one WSI per slide.
            if development && cfg.n_scanners > 1 && rng.random::<f64>() < cfg.rescan_fraction {
                scanners.push((base_scanner + 1) % cfg.n_scanners);
            }

            for scanner in scanners {
                let slide_name = format!("s{patient:04}_{slide_idx}");
                let filename = format!("w_{slide_name}_sc{scanner}.png");
                let row = ManifestRow {
                    cohort: "SYNTH".into(),
                    original_patient_id: format!("p{patient:04}"),
                    original_slide_id: slide_name.clone(),
                    filename: filename.clone(),
                    scanner_vendor: "SynthScan".into(),
                    scanner_model: format!("S{scanner}"),
                    scanner_serial: format!("SN{scanner:02}"),
                    scan_timestamp: format!("2024-01-01T00:00:00+sc{scanner}"),
                    pixel_size_um: "1.0".into(),
                    label_level: "slide".into(),
                    gleason_primary: if score.is_benign() {
                        String::new()
                    } else {
                        score.primary().clinical().to_string()
                    },
                    gleason_secondary: if score.is_benign() {
                        String::new()
                    } else {
                        score.secondary().clinical().to_string()
                    },
                    isup: isup.grade().to_string(),
                    group_key: String::new(),
                    split: split.into(),
                    cv_fold: String::new(),
                };
                let (_, _, wsi_id) = row.ids()?;
                summary.wsis += 1;

                // Raster + sidecar.
                let mut paint_rng = ChaCha12Rng::seed_from_u64(
                    cfg.seed ^ (summary.wsis as u64) << 16 | scanner as u64,
                );
                let img =
                    paint_raster(&cells, cfg.grid, cfg.patch_edge_px, scanner, &mut paint_rng);
                let png_path = out.raster_dir.join(&filename);
                img.save_png(&png_path)?;
                let sidecar = PyramidSidecar {
                    levels: vec![LevelEntry {
                        file: filename.clone(),
                        pixel_size_um: 1.0,
                    }],
                };
                let sidecar_path = out.raster_dir.join(format!("{filename}.json"));
                std::fs::write(
                    &sidecar_path,
                    serde_json::to_string_pretty(&sidecar).expect("serializable sidecar"),
                )
                .map_err(io_err(&sidecar_path))?;

                // Tile through the real pipeline to find the canonical
                // patch set, then write matching embeddings and truth.
                let pyramid = RasterPyramid::from_levels(vec![(img.clone(), 1.0)])?;
                let mask_frame = crate::tile::resample_lanczos(&img, 1.0, 8.0)?;
                let mask = segment_tissue_threshold(&mask_frame, 8.0, ThresholdParams::default())?;
                let records = extract_patch_grid(&pyramid, &mask, cfg.patch_edge_px, 1.0, 0, 0.10)?;

                let mut entries = Vec::with_capacity(records.len());
                let mut truth = WsiTruth {
                    patch_edge_px: cfg.patch_edge_px,
                    classes: BTreeMap::new(),
                };
                let mut embed_rng = ChaCha12Rng::seed_from_u64(
                    cfg.seed ^ 0x9e3779b97f4a7c15 ^ (summary.wsis as u64),
                );
                for patch in &records.patches {
                    let cx = patch.x / cfg.patch_edge_px as u32;
                    let cy = patch.y / cfg.patch_edge_px as u32;
                    let class = cells[(cy * cfg.grid.0 + cx) as usize].unwrap_or(0);
                    truth
                        .classes
                        .insert(format!("{},{}", patch.x, patch.y), class);
                    entries.push((
                        patch_key(patch.x, patch.y),
                        oracle_embedding(class, scanner, cfg.embed_dim, &mut embed_rng),
                    ));
                }
                write_embeddings(
                    &out.embed_dir.join(format!("{wsi_id}.gem")),
                    &EmbeddingFile {
                        embed_dim: cfg.embed_dim,
                        entries,
                    },
                )?;
                let truth_path = out.truth_dir.join(format!("{wsi_id}.json"));
                std::fs::write(
                    &truth_path,
                    serde_json::to_string_pretty(&truth).expect("serializable truth"),
                )
                .map_err(io_err(&truth_path))?;

                rows.push(row);
            }
        }
    }

    let manifest = CohortManifest::new(rows);
    let manifest = make_cv_folds(&manifest, cfg.cv_folds, cfg.seed ^ 0xf01d)?;
    manifest.save(&out.manifest_path)?;
    Ok(summary)
}
