//! Per-fold training with early stopping, and cross-validation.
//!
//! Each iteration samples up to `max_patches_per_wsi` patches without
//! replacement from one WSI as a minibatch with a slide-level label.
//! Per-WSI gradients are computed independently (in parallel when a rayon
//! pool is available), summed in 64-bit accumulators in deterministic
//! order, and averaged over the effective batch before each optimizer
//! step — numerically equivalent to averaging per-WSI gradients across a
//! distributed run. After every epoch the held-out fold is scored by ISUP
//! quadratic kappa; training stops when no improvement has been seen for
//! `patience_epochs` epochs and the best-epoch checkpoint is kept.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grading::gs_to_isup;
use crate::manifest::{LabelLevel, ManifestIndex, Split};
use crate::model::{
    forward_slide, init_params, predict_patterns, read_checkpoint, read_embeddings,
    write_checkpoint, Bag, DropoutMode, EncoderMode, EncoderSpec, FeatureMap, GradAccumulator,
    Matrix, MilParams,
};
use crate::stats::{cohen_kappa, derive_seed, KappaWeighting, PairedRatings};
use crate::tile::{dihedral_transform, read_patch_records};

use super::adamw::{optimizer_step, AdamWState};
use super::backward::backward;
use super::sampler::epoch_sample_excluding;
use super::{TrainConfig, TrainError};

// Stream tags for derived seeds.
const STREAM_INIT: u64 = 1;
const STREAM_EPOCH: u64 = 2;
const STREAM_SUBSAMPLE: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_DIHEDRAL: u64 = 5;

/// Loads per-WSI bags from disk with an in-memory cache.
pub struct BagLoader {
    mode: EncoderMode,
    patch_dir: PathBuf,
    embed_dir: PathBuf,
    cache: RwLock<HashMap<String, RawBag>>,
}

#[derive(Clone)]
enum RawBag {
    Embeddings(Arc<Matrix<f32>>),
    Patches(Arc<crate::tile::PatchRecordFile>),
}

impl RawBag {
    fn len(&self) -> usize {
        match self {
            RawBag::Embeddings(m) => m.rows,
            RawBag::Patches(f) => f.patches.len(),
        }
    }
}

impl BagLoader {
    pub fn new(mode: EncoderMode, patch_dir: &Path, embed_dir: &Path) -> Self {
        BagLoader {
            mode,
            patch_dir: patch_dir.to_path_buf(),
            embed_dir: embed_dir.to_path_buf(),
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn mode(&self) -> EncoderMode {
        self.mode
    }

    fn raw(&self, wsi_id: &str) -> Result<RawBag, TrainError> {
        if let Some(hit) = self.cache.read().unwrap().get(wsi_id) {
            return Ok(hit.clone());
        }
        let raw = match self.mode {
            EncoderMode::FrozenFile => {
                let path = self.embed_dir.join(format!("{wsi_id}.gem"));
                let file = read_embeddings(&path)?;
                RawBag::Embeddings(Arc::new(file.to_matrix()))
            }
            EncoderMode::TrainableToy => {
                let path = self.patch_dir.join(format!("{wsi_id}.gpr"));
                RawBag::Patches(Arc::new(read_patch_records(&path)?))
            }
        };
        self.cache
            .write()
            .unwrap()
            .insert(wsi_id.to_string(), raw.clone());
        Ok(raw)
    }

    /// Number of patches available for a WSI.
    pub fn patch_count(&self, wsi_id: &str) -> Result<usize, TrainError> {
        Ok(self.raw(wsi_id)?.len())
    }

    /// The full bag of one or more WSIs pooled together, in file order,
    /// without augmentation.
    pub fn pooled_bag(&self, wsi_ids: &[String]) -> Result<Bag<f32>, TrainError> {
        let raws: Vec<RawBag> = wsi_ids
            .iter()
            .map(|id| self.raw(id))
            .collect::<Result<_, _>>()?;
        match self.mode {
            EncoderMode::FrozenFile => {
                let mut rows = Vec::new();
                let mut dim = 0;
                for raw in &raws {
                    let RawBag::Embeddings(m) = raw else {
                        unreachable!()
                    };
                    dim = m.cols;
                    rows.extend_from_slice(&m.data);
                }
                Ok(Bag::Embeddings(Matrix::from_vec(
                    rows.len() / dim.max(1),
                    dim,
                    rows,
                )))
            }
            EncoderMode::TrainableToy => {
                let mut patches = Vec::new();
                for raw in &raws {
                    let RawBag::Patches(f) = raw else {
                        unreachable!()
                    };
                    for p in &f.patches {
                        patches.push(FeatureMap::from_rgb_bytes(
                            f.patch_edge_px as u32,
                            f.patch_edge_px as u32,
                            &p.pixels,
                        ));
                    }
                }
                Ok(Bag::Patches(patches))
            }
        }
    }

    /// A training bag for one WSI: up to `max_patches` sampled without
    /// replacement; in toy mode each patch gets an independent random
    /// dihedral transform.
    pub fn training_bag(
        &self,
        wsi_id: &str,
        max_patches: usize,
        subsample_seed: u64,
        dihedral_seed: u64,
    ) -> Result<Bag<f32>, TrainError> {
        let raw = self.raw(wsi_id)?;
        let n = raw.len();
        let take = n.min(max_patches);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(subsample_seed);
        order.partial_shuffle(&mut rng, take);
        order.truncate(take);
        match raw {
            RawBag::Embeddings(m) => {
                let mut rows = Vec::with_capacity(take * m.cols);
                for &i in &order {
                    rows.extend_from_slice(m.row(i));
                }
                Ok(Bag::Embeddings(Matrix::from_vec(take, m.cols, rows)))
            }
            RawBag::Patches(f) => {
                let mut ops_rng = ChaCha12Rng::seed_from_u64(dihedral_seed);
                let edge = f.patch_edge_px as u32;
                let mut patches = Vec::with_capacity(take);
                for &i in &order {
                    let img = f.patches[i].to_image(f.patch_edge_px);
                    let op = ops_rng.random_range(0..8u8);
                    let img = dihedral_transform(&img, op)?;
                    patches.push(FeatureMap::from_rgb_bytes(edge, edge, &img.pixels));
                }
                Ok(Bag::Patches(patches))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub fold: u32,
    pub train_loss: f64,
    /// NaN when kappa was undefined on the holdout.
    pub holdout_qwk: f64,
}

/// The result of training one fold: the best-epoch checkpoint.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: u32,
    pub params: MilParams<f32>,
    pub best_qwk: f64,
    pub best_epoch: u32,
    pub log: Vec<EpochLog>,
}

/// Serialized ensemble metadata, one entry per fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMeta {
    pub fold: u32,
    pub best_qwk: Option<f64>,
    pub best_epoch: u32,
    pub checkpoint: String,
}

/// One checkpoint per CV fold.
pub struct EnsembleCheckpoint {
    pub folds: Vec<FoldOutcome>,
}

impl EnsembleCheckpoint {
    pub fn models(&self) -> Vec<&MilParams<f32>> {
        self.folds.iter().map(|f| &f.params).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir).map_err(|source| {
            TrainError::Data(format!("cannot create {}: {source}", dir.display()))
        })?;
        let mut metas = Vec::new();
        for outcome in &self.folds {
            let name = format!("fold_{}.gmc", outcome.fold);
            write_checkpoint(&dir.join(&name), &outcome.params)?;
            metas.push(FoldMeta {
                fold: outcome.fold,
                best_qwk: if outcome.best_qwk.is_nan() {
                    None
                } else {
                    Some(outcome.best_qwk)
                },
                best_epoch: outcome.best_epoch,
                checkpoint: name,
            });
        }
        let json = serde_json::to_string_pretty(&metas).expect("serializable metadata");
        std::fs::write(dir.join("ensemble.json"), json)
            .map_err(|source| TrainError::Data(format!("cannot write ensemble.json: {source}")))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(dir.join("ensemble.json")).map_err(|source| {
            TrainError::Data(format!(
                "cannot read ensemble.json in {}: {source}",
                dir.display()
            ))
        })?;
        let metas: Vec<FoldMeta> = serde_json::from_str(&text)
            .map_err(|e| TrainError::Data(format!("bad ensemble.json: {e}")))?;
        let mut seen = std::collections::BTreeSet::new();
        let mut folds = Vec::new();
        for meta in metas {
            if !seen.insert(meta.fold) {
                return Err(TrainError::Data(format!(
                    "fold {} appears twice",
                    meta.fold
                )));
            }
            let params = read_checkpoint(&dir.join(&meta.checkpoint))?;
            folds.push(FoldOutcome {
                fold: meta.fold,
                params,
                best_qwk: meta.best_qwk.unwrap_or(f64::NAN),
                best_epoch: meta.best_epoch,
                log: Vec::new(),
            });
        }
        Ok(EnsembleCheckpoint { folds })
    }
}

/// Slide-level labeled holdout slides of a fold, as (slide_id, isup, wsi).
fn holdout_slides(index: &ManifestIndex, fold: u32) -> Vec<(String, u8, String)> {
    let mut out = Vec::new();
    for patient in index.patients.values() {
        if patient.split != Split::Development || patient.cv_fold != Some(fold) {
            continue;
        }
        for slide_id in &patient.slide_ids {
            let slide = &index.slides[slide_id];
            if let Some(label) = &slide.reference {
                if label.level == LabelLevel::Slide {
                    let mut wsis = slide.wsi_ids.clone();
                    wsis.sort();
                    out.push((slide_id.clone(), label.isup.grade(), wsis[0].clone()));
                }
            }
        }
    }
    out.sort();
    out
}

/// ISUP quadratic kappa of single-model predictions on the holdout; NaN
/// when undefined (e.g. a constant holdout).
fn eval_holdout(
    params: &MilParams<f32>,
    loader: &BagLoader,
    holdout: &[(String, u8, String)],
) -> Result<f64, TrainError> {
    let mut reference = Vec::with_capacity(holdout.len());
    let mut predicted = Vec::with_capacity(holdout.len());
    let results: Vec<Option<(u8, u8)>> = holdout
        .par_iter()
        .map(|(_, isup, wsi_id)| {
            let bag = loader.pooled_bag(std::slice::from_ref(wsi_id)).ok()?;
            if bag.is_empty() {
                return None;
            }
            let fwd = forward_slide(params, &bag, DropoutMode::Off).ok()?;
            let score = predict_patterns(&fwd);
            Some((*isup, gs_to_isup(score).grade()))
        })
        .collect();
    for pair in results.into_iter().flatten() {
        reference.push(pair.0 as usize);
        predicted.push(pair.1 as usize);
    }
    if reference.is_empty() {
        return Ok(f64::NAN);
    }
    let ratings = PairedRatings::new(reference, predicted, 6)?;
    Ok(cohen_kappa(&ratings, KappaWeighting::Quadratic).unwrap_or(f64::NAN))
}

/// Train on the development patients outside `fold`, early-stopping on the
/// fold's held-out slides.
pub fn train_fold(
    index: &ManifestIndex,
    loader: &BagLoader,
    spec: &EncoderSpec,
    fold: u32,
    cfg: &TrainConfig,
) -> Result<FoldOutcome, TrainError> {
    let mut params: MilParams<f32> =
        init_params(spec, derive_seed(cfg.seed, &[STREAM_INIT, fold as u64]));
    let mut state = AdamWState::new(&params);
    let holdout = holdout_slides(index, fold);

    let mut best: Option<(f64, u32, MilParams<f32>)> = None;
    let mut log = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let order = epoch_sample_excluding(
            index,
            Some(fold),
            derive_seed(cfg.seed, &[STREAM_EPOCH, fold as u64, epoch as u64]),
        );
        if order.is_empty() {
            return Err(TrainError::Data(format!(
                "fold {fold}: no slide-level labeled development slides to train on"
            )));
        }

        let mut epoch_loss = 0.0f64;
        let mut epoch_wsis = 0usize;
        for (chunk_idx, chunk) in order.chunks(cfg.effective_batch_wsis as usize).enumerate() {
            // Per-WSI gradients in parallel; everything seeded by the
            // global position so thread scheduling cannot matter.
            type WsiGrads = Option<(f64, crate::model::Gradients<f32>)>;
            let results: Vec<Result<WsiGrads, TrainError>> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, (slide_id, wsi_id))| {
                    let global = (chunk_idx * cfg.effective_batch_wsis as usize + i) as u64;
                    let sub_seed = derive_seed(
                        cfg.seed,
                        &[STREAM_SUBSAMPLE, fold as u64, epoch as u64, global],
                    );
                    let drop_seed = derive_seed(
                        cfg.seed,
                        &[STREAM_DROPOUT, fold as u64, epoch as u64, global],
                    );
                    let ops_seed = derive_seed(
                        cfg.seed,
                        &[STREAM_DIHEDRAL, fold as u64, epoch as u64, global],
                    );
                    let bag =
                        loader.training_bag(wsi_id, cfg.max_patches_per_wsi, sub_seed, ops_seed)?;
                    if bag.is_empty() {
                        return Ok(None);
                    }
                    let reference = index.slides[slide_id]
                        .reference
                        .as_ref()
                        .expect("epoch sampler only yields labeled slides");
                    // Benign slides may legitimately omit the score.
                    let label = match reference.score {
                        Some(score) => score,
                        None if reference.isup.is_benign() => crate::grading::GleasonScore::BENIGN,
                        None => {
                            return Err(TrainError::Data(format!(
                                "slide {slide_id} reports only a grade; pattern \
                                     targets need a score"
                            )))
                        }
                    };
                    let (loss, grads) = backward(
                        &params,
                        &bag,
                        label,
                        DropoutMode::Seeded(drop_seed),
                        cfg.accumulation_interval,
                    )?;
                    Ok(Some((loss, grads)))
                })
                .collect();

            let mut accumulator = GradAccumulator::zeros_like(&params);
            for result in results {
                if let Some((loss, grads)) = result? {
                    accumulator.add(&grads);
                    epoch_loss += loss * cfg.accumulation_interval as f64;
                    epoch_wsis += 1;
                }
            }
            if accumulator.count == 0 {
                continue;
            }
            // Mean per-WSI gradient: per-WSI losses carry 1/interval, so
            // scale the sum by interval/count.
            let scale = cfg.accumulation_interval as f64 / accumulator.count as f64;
            let grads = accumulator.finish::<f32>(scale);
            optimizer_step(&mut params, &grads, &mut state, cfg)?;
        }

        let qwk = if holdout.is_empty() {
            f64::NAN
        } else {
            eval_holdout(&params, loader, &holdout)?
        };
        log.push(EpochLog {
            epoch,
            fold,
            train_loss: if epoch_wsis > 0 {
                epoch_loss / epoch_wsis as f64
            } else {
                f64::NAN
            },
            holdout_qwk: qwk,
        });

        let improved = match &best {
            None => true,
            Some((best_qwk, _, _)) => qwk > *best_qwk || (best_qwk.is_nan() && !qwk.is_nan()),
        };
        if improved {
            best = Some((qwk, epoch, params.clone()));
        }
        let best_epoch = best.as_ref().expect("set at epoch 1").1;
        if epoch - best_epoch >= cfg.patience_epochs {
            break;
        }
    }

    let (best_qwk, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(FoldOutcome {
        fold,
        params: best_params,
        best_qwk,
        best_epoch,
        log,
    })
}

/// Train every fold and collect the ensemble. Any fold failure aborts and
/// names the fold.
pub fn train_cv(
    index: &ManifestIndex,
    loader: &BagLoader,
    spec: &EncoderSpec,
    k: u32,
    cfg: &TrainConfig,
) -> Result<EnsembleCheckpoint, TrainError> {
    let mut folds = Vec::with_capacity(k as usize);
    for fold in 0..k {
        let outcome =
            train_fold(index, loader, spec, fold, cfg).map_err(|e| TrainError::FoldFailed {
                fold,
                source: Box::new(e),
            })?;
        folds.push(outcome);
    }
    Ok(EnsembleCheckpoint { folds })
}

/// Write the training log as CSV (epoch, fold, train_loss, holdout_qwk).
pub fn write_training_log(path: &Path, logs: &[EpochLog]) -> Result<(), TrainError> {
    let mut out = String::from("epoch,fold,train_loss,holdout_qwk\n");
    for entry in logs {
        let qwk = if entry.holdout_qwk.is_nan() {
            String::new()
        } else {
            format!("{}", entry.holdout_qwk)
        };
        out.push_str(&format!(
            "{},{},{},{}\n",
            entry.epoch, entry.fold, entry.train_loss, qwk
        ));
    }
    std::fs::write(path, out)
        .map_err(|source| TrainError::Data(format!("cannot write {}: {source}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{patch_key, write_embeddings, EmbeddingFile};

    /// Build a tiny separable frozen-embedding cohort on disk.
    fn tiny_cohort(dir: &Path, n_patients: usize, folds: u32) -> (ManifestIndex, BagLoader) {
        use crate::manifest::{CohortManifest, ManifestRow};
        let embed_dim = 8;
        let mut rows = Vec::new();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for i in 0..n_patients {
            let isup = (i % 3) as u8; // benign, 3+3, 3+4
            let (gp, gs) = match isup {
                0 => ("", ""),
                1 => ("3", "3"),
                _ => ("3", "4"),
            };
            let row = ManifestRow {
                cohort: "C".into(),
                original_patient_id: format!("p{i}"),
                original_slide_id: format!("s{i}"),
                filename: format!("f{i}.png"),
                scanner_vendor: "SynthScan".into(),
                scanner_model: "S1".into(),
                scanner_serial: "SN1".into(),
                scan_timestamp: format!("2024-01-01T00:00:{i:02}"),
                pixel_size_um: "1.0".into(),
                label_level: "slide".into(),
                gleason_primary: gp.into(),
                gleason_secondary: gs.into(),
                isup: isup.to_string(),
                group_key: String::new(),
                split: "development".into(),
                cv_fold: (i as u32 % folds).to_string(),
            };
            let (_, _, wsi_id) = row.ids().unwrap();
            // Class-informative embeddings: a peak at the dominant pattern
            // code plus noise.
            let class = match isup {
                0 => 0usize,
                1 => 1,
                _ => 1,
            };
            let n_patches = 6;
            let entries: Vec<(String, Vec<f32>)> = (0..n_patches)
                .map(|p| {
                    let mut v: Vec<f32> = (0..embed_dim)
                        .map(|_| rng.random_range(-0.2..0.2))
                        .collect();
                    // Secondary pattern for 3+4 slides on half the patches.
                    let c = if isup == 2 && p % 2 == 0 { 2 } else { class };
                    v[c] += 3.0;
                    (patch_key(p as u32 * 16, 0), v)
                })
                .collect();
            write_embeddings(
                &dir.join(format!("{wsi_id}.gem")),
                &EmbeddingFile { embed_dim, entries },
            )
            .unwrap();
            rows.push(row);
        }
        let index = CohortManifest::new(rows).index().unwrap();
        let loader = BagLoader::new(EncoderMode::FrozenFile, dir, dir);
        (index, loader)
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            patience_epochs: 2,
            max_epochs: 6,
            effective_batch_wsis: 8,
            accumulation_interval: 2,
            lr: 3e-4,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn patience_zero_returns_the_first_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let (index, loader) = tiny_cohort(dir.path(), 12, 2);
        let cfg = TrainConfig {
            patience_epochs: 0,
            ..quick_cfg(1)
        };
        let outcome = train_fold(&index, &loader, &EncoderSpec::frozen(8), 0, &cfg).unwrap();
        assert_eq!(outcome.best_epoch, 1);
        assert_eq!(outcome.log.len(), 1);
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (index, loader) = tiny_cohort(dir.path(), 12, 2);
        let cfg = quick_cfg(5);
        let spec = EncoderSpec::frozen(8);
        let a = train_fold(&index, &loader, &spec, 0, &cfg).unwrap();
        let b = train_fold(&index, &loader, &spec, 0, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.best_epoch, b.best_epoch);
        // Checkpoint files are byte-identical too.
        let pa = dir.path().join("a.gmc");
        let pb = dir.path().join("b.gmc");
        write_checkpoint(&pa, &a.params).unwrap();
        write_checkpoint(&pb, &b.params).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn cv_yields_one_checkpoint_per_fold_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (index, loader) = tiny_cohort(dir.path(), 12, 2);
        let cfg = quick_cfg(2);
        let ensemble = train_cv(&index, &loader, &EncoderSpec::frozen(8), 2, &cfg).unwrap();
        assert_eq!(ensemble.folds.len(), 2);
        assert_ne!(
            ensemble.folds[0].params, ensemble.folds[1].params,
            "different folds see different data"
        );
        let out = dir.path().join("ensemble");
        ensemble.save(&out).unwrap();
        let loaded = EnsembleCheckpoint::load(&out).unwrap();
        assert_eq!(loaded.folds.len(), 2);
        for (a, b) in loaded.folds.iter().zip(&ensemble.folds) {
            assert_eq!(a.params, b.params);
            assert_eq!(a.fold, b.fold);
            assert_eq!(a.best_epoch, b.best_epoch);
            assert!((a.best_qwk - b.best_qwk).abs() < 1e-12);
        }
    }

    #[test]
    fn training_bag_subsamples_without_replacement() {
        let dir = tempfile::tempdir().unwrap();
        let (index, loader) = tiny_cohort(dir.path(), 3, 2);
        let wsi_id = index.wsis.keys().next().unwrap().clone();
        let bag = loader.training_bag(&wsi_id, 4, 11, 12).unwrap();
        assert_eq!(bag.len(), 4);
        let full = loader.training_bag(&wsi_id, 100, 11, 12).unwrap();
        assert_eq!(full.len(), 6, "capped at the available patches");
        let Bag::Embeddings(m) = full else {
            unreachable!()
        };
        // No duplicate rows: check pairwise distinctness of the noise.
        for i in 0..m.rows {
            for j in (i + 1)..m.rows {
                assert_ne!(m.row(i), m.row(j));
            }
        }
    }
}
