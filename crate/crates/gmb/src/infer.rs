//! Production prediction path.
//!
//! Slides, locations or patients become prediction units whose patches are
//! pooled into one bag. Every (model, TTA run) pair votes with a corrected
//! Gleason score; the majority of ensemble x TTA votes wins, ties breaking
//! toward the higher (more severe) ordinal. The malignancy score for ROC
//! analysis is the mean over votes of one minus the primary head's benign
//! probability.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::grading::{
    decode_gs_ordinal, encode_gs_ordinal, gs_to_isup, GleasonScore, GsOrdinal, IsupGrade,
};
use crate::manifest::{LabelLevel, ManifestIndex, ReferenceLabel};
use crate::md5::md5;
use crate::model::{
    forward_patch, forward_slide, patch_key, predict_patterns, Bag, DropoutMode, EmbeddingFile,
    FeatureMap, MilParams, ModelError,
};
use crate::stats::derive_seed;
use crate::tile::{dihedral_transform, PatchRecordFile, TileError};
use crate::train::{BagLoader, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] TrainError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error("cohort {cohort} mixes label levels {a} and {b}")]
    MixedLevels {
        cohort: String,
        a: String,
        b: String,
    },
    #[error("unit {unit_key}: slides disagree on the reference label")]
    LabelConflict { unit_key: String },
    #[error("no embedding for patch at ({x}, {y})")]
    MissingEmbedding { x: u32, y: u32 },
    #[error("predictions file {path}: {message}")]
    PredictionsFormat { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A set of WSIs sharing one reference-standard label.
#[derive(Debug, Clone)]
pub struct PredictionUnit {
    pub unit_key: String,
    pub cohort: String,
    pub level: LabelLevel,
    pub wsi_ids: Vec<String>,
    pub reference: ReferenceLabel,
}

/// Group labeled slides into prediction units: one per slide for
/// slide-level cohorts, one per group key for location/patient-level
/// cohorts. Levels may not mix within a cohort.
pub fn group_units(index: &ManifestIndex) -> Result<Vec<PredictionUnit>, InferError> {
    let mut cohort_level: BTreeMap<String, LabelLevel> = BTreeMap::new();
    let mut units: BTreeMap<String, PredictionUnit> = BTreeMap::new();

    for slide in index.slides.values() {
        let Some(label) = &slide.reference else {
            continue;
        };
        match cohort_level.get(&slide.cohort) {
            None => {
                cohort_level.insert(slide.cohort.clone(), label.level);
            }
            Some(level) if *level != label.level => {
                return Err(InferError::MixedLevels {
                    cohort: slide.cohort.clone(),
                    a: level.to_string(),
                    b: label.level.to_string(),
                });
            }
            Some(_) => {}
        }
        let unit_key = match label.level {
            LabelLevel::Slide => slide.slide_id.clone(),
            _ => format!("{}|{}", slide.cohort, label.group_key),
        };
        let mut wsi_ids = slide.wsi_ids.clone();
        wsi_ids.sort();
        match units.get_mut(&unit_key) {
            None => {
                units.insert(
                    unit_key.clone(),
                    PredictionUnit {
                        unit_key,
                        cohort: slide.cohort.clone(),
                        level: label.level,
                        wsi_ids,
                        reference: label.clone(),
                    },
                );
            }
            Some(unit) => {
                if unit.reference.isup != label.isup || unit.reference.score != label.score {
                    return Err(InferError::LabelConflict { unit_key });
                }
                unit.wsi_ids.extend(wsi_ids);
                unit.wsi_ids.sort();
            }
        }
    }
    Ok(units.into_values().collect())
}

/// One unit's ensemble x TTA votes and the majority decision.
#[derive(Debug, Clone, Serialize)]
pub struct VoteRecord {
    pub unit_key: String,
    pub level: LabelLevel,
    pub votes: Vec<GsOrdinal>,
    pub winner: GleasonScore,
    pub winner_isup: IsupGrade,
    pub malignancy: f64,
}

/// Majority vote with ties broken toward the higher ordinal.
fn majority(votes: &[GsOrdinal]) -> GsOrdinal {
    let mut counts = [0usize; 10];
    for v in votes {
        counts[v.value() as usize] += 1;
    }
    let mut winner = 0usize;
    for (ord, &count) in counts.iter().enumerate() {
        if count >= counts[winner] && count > 0 {
            winner = ord;
        }
    }
    GsOrdinal::new(winner as u8).expect("ordinal in range")
}

fn unit_stream(unit_key: &str) -> u64 {
    let digest = md5(unit_key.as_bytes());
    u64::from_le_bytes(digest[0..8].try_into().unwrap())
}

/// Predict one unit with every model and `tta_runs` augmentation rounds
/// per model. Patches receive independent random dihedral transforms per
/// round (a no-op for precomputed embeddings, whose stand-in encoder is
/// orientation-free).
pub fn predict_unit(
    models: &[&MilParams<f32>],
    unit: &PredictionUnit,
    loader: &BagLoader,
    tta_runs: u32,
    seed: u64,
) -> Result<VoteRecord, InferError> {
    let base = loader.pooled_bag(&unit.wsi_ids)?;
    if base.is_empty() {
        return Err(InferError::Model(ModelError::EmptyBag));
    }
    let mut votes = Vec::with_capacity(models.len() * tta_runs as usize);
    let mut malignancy_sum = 0.0f64;
    for (m_idx, model) in models.iter().enumerate() {
        for t in 0..tta_runs {
            let stream = derive_seed(seed, &[unit_stream(&unit.unit_key), m_idx as u64, t as u64]);
            let bag = transform_bag(&base, stream)?;
            let fwd = forward_slide(model, &bag, DropoutMode::Off)?;
            let score = predict_patterns(&fwd);
            votes.push(encode_gs_ordinal(score));
            malignancy_sum += 1.0 - fwd.probs_primary[0] as f64;
        }
    }
    let winner_ordinal = majority(&votes);
    let winner = decode_gs_ordinal(winner_ordinal);
    Ok(VoteRecord {
        unit_key: unit.unit_key.clone(),
        level: unit.level,
        winner_isup: gs_to_isup(winner),
        winner,
        malignancy: malignancy_sum / votes.len() as f64,
        votes,
    })
}

/// Independent random dihedral transform per patch; embeddings pass
/// through unchanged.
fn transform_bag(bag: &Bag<f32>, seed: u64) -> Result<Bag<f32>, InferError> {
    match bag {
        Bag::Embeddings(m) => Ok(Bag::Embeddings(m.clone())),
        Bag::Patches(patches) => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut out = Vec::with_capacity(patches.len());
            for patch in patches {
                let op: u8 = rng.random_range(0..8);
                out.push(dihedral_feature_map(patch, op)?);
            }
            Ok(Bag::Patches(out))
        }
    }
}

/// Apply a dihedral op to a float patch by round-tripping through the
/// byte-image transform, keeping one source of truth for the op table.
fn dihedral_feature_map(patch: &FeatureMap<f32>, op: u8) -> Result<FeatureMap<f32>, InferError> {
    if op == 0 {
        return Ok(patch.clone());
    }
    let (h, w) = (patch.height, patch.width);
    let mut img = crate::tile::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (patch.at(0, y, x) * 255.0).round().clamp(0.0, 255.0) as u8,
                (patch.at(1, y, x) * 255.0).round().clamp(0.0, 255.0) as u8,
                (patch.at(2, y, x) * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            img.set(x as u32, y as u32, px);
        }
    }
    let turned = dihedral_transform(&img, op)?;
    Ok(FeatureMap::from_rgb_bytes(
        w as u32,
        h as u32,
        &turned.pixels,
    ))
}

/// Per-patch pattern probabilities with origins, for heatmap export.
#[derive(Debug, Clone, Serialize)]
pub struct HeatmapRow {
    pub x: u32,
    pub y: u32,
    pub p_benign: f64,
    pub p3: f64,
    pub p4: f64,
    pub p5: f64,
}

/// Classify every patch of a record file individually (attention pooling
/// bypassed). Frozen-encoder models look embeddings up by patch origin.
pub fn heatmap(
    params: &MilParams<f32>,
    records: &PatchRecordFile,
    embeddings: Option<&EmbeddingFile>,
) -> Result<Vec<HeatmapRow>, InferError> {
    let rows: Vec<Result<HeatmapRow, InferError>> = records
        .patches
        .par_iter()
        .map(|patch| {
            let bag = match embeddings {
                Some(file) => {
                    let key = patch_key(patch.x, patch.y);
                    let row = file.lookup(&key).ok_or(InferError::MissingEmbedding {
                        x: patch.x,
                        y: patch.y,
                    })?;
                    Bag::one_embedding(row.to_vec())
                }
                None => Bag::one_patch(FeatureMap::from_rgb_bytes(
                    records.patch_edge_px as u32,
                    records.patch_edge_px as u32,
                    &patch.pixels,
                )),
            };
            let fwd = forward_patch(params, &bag)?;
            Ok(HeatmapRow {
                x: patch.x,
                y: patch.y,
                p_benign: fwd.probs_primary[0] as f64,
                p3: fwd.probs_primary[1] as f64,
                p4: fwd.probs_primary[2] as f64,
                p5: fwd.probs_primary[3] as f64,
            })
        })
        .collect();
    rows.into_iter().collect()
}

pub fn heatmap_csv(rows: &[HeatmapRow]) -> String {
    let mut out = String::from("x,y,p_benign,p3,p4,p5\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.x, r.y, r.p_benign, r.p3, r.p4, r.p5
        ));
    }
    out
}

/// Predictions file: one row per unit.
pub fn predictions_csv(records: &[VoteRecord]) -> String {
    let mut out = String::from("unit_key,level,winner_gs,winner_isup,malignancy,votes\n");
    for r in records {
        let votes: Vec<String> = r.votes.iter().map(|v| v.value().to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.unit_key,
            r.level,
            r.winner,
            r.winner_isup,
            r.malignancy,
            votes.join(";")
        ));
    }
    out
}

/// Parse a predictions file written by [`predictions_csv`].
pub fn read_predictions(path: &Path) -> Result<Vec<VoteRecord>, InferError> {
    let text = std::fs::read_to_string(path).map_err(|source| InferError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bad = |message: &str| InferError::PredictionsFormat {
        path: path.display().to_string(),
        message: message.to_string(),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "unit_key,level,winner_gs,winner_isup,malignancy,votes" {
                return Err(bad("unexpected header"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(&format!("line {} has {} fields", i + 1, fields.len())));
        }
        let level: LabelLevel = fields[1]
            .parse()
            .map_err(|_| bad(&format!("bad level {:?}", fields[1])))?;
        let winner: GleasonScore = fields[2]
            .parse()
            .map_err(|_| bad(&format!("bad score {:?}", fields[2])))?;
        let winner_isup: IsupGrade = fields[3]
            .parse()
            .map_err(|_| bad(&format!("bad isup {:?}", fields[3])))?;
        let malignancy: f64 = fields[4]
            .parse()
            .map_err(|_| bad(&format!("bad malignancy {:?}", fields[4])))?;
        let votes = fields[5]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<u8>()
                    .ok()
                    .and_then(|v| GsOrdinal::new(v).ok())
                    .ok_or_else(|| bad(&format!("bad vote {s:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(VoteRecord {
            unit_key: fields[0].to_string(),
            level,
            votes,
            winner,
            winner_isup,
            malignancy,
        });
    }
    Ok(out)
}
