//! Command-line workflow: synth, validate, tile, train, predict, evaluate,
//! audit, energy.
//!
//! Every subcommand reads one JSON run configuration, writes its artifacts
//! under the configured directories, and is idempotent for fixed inputs
//! and seeds. Exit codes: 0 success, 1 validation violations, 2 runtime
//! errors. The `GMB_SEED` environment variable overrides the config seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{energy_report, EnergyError, PowerLog};
use crate::grading::encode_gs_ordinal;
use crate::infer::{
    group_units, heatmap, heatmap_csv, predict_unit, predictions_csv, read_predictions, InferError,
    PredictionUnit,
};
use crate::manifest::{apply_exclusions, validate_manifest, CohortManifest, ManifestError, Split};
use crate::model::{read_embeddings, EncoderMode, EncoderSpec, ModelError};
use crate::stats::{
    audit_intersection, evaluate_cohorts, significant_error_audit, EvalCase, StatsError,
};
use crate::synth::{generate, SynthConfig, SynthError, SynthPaths};
use crate::tile::{
    extract_patch_grid, load_pyramid, resample_lanczos, segment_tissue_threshold,
    write_patch_records, ThresholdParams, TileError,
};
use crate::train::{train_cv, BagLoader, EnsembleCheckpoint, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Misuse(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub raster_dir: PathBuf,
    pub patch_dir: PathBuf,
    pub embed_dir: PathBuf,
    pub truth_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl PathsConfig {
    /// Conventional layout with everything under one root.
    pub fn under(root: &Path) -> Self {
        PathsConfig {
            manifest: root.join("manifest.csv"),
            raster_dir: root.join("rasters"),
            patch_dir: root.join("patches"),
            embed_dir: root.join("embeddings"),
            truth_dir: root.join("truth"),
            checkpoint_dir: root.join("checkpoints"),
            report_dir: root.join("reports"),
        }
    }
}

fn default_edge() -> u16 {
    16
}
fn default_target_um() -> f64 {
    1.0
}
fn default_mask_um() -> f64 {
    8.0
}
fn default_min_tissue() -> f64 {
    0.10
}

/// Tiling parameters. The desk-scale defaults mirror the synthetic
/// generator; production-scale rasters would use 256 px patches instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileSection {
    #[serde(default = "default_edge")]
    pub edge_px: u16,
    #[serde(default = "default_target_um")]
    pub target_um_per_px: f64,
    #[serde(default)]
    pub overlap_px: u16,
    #[serde(default = "default_min_tissue")]
    pub min_tissue_fraction: f64,
    #[serde(default = "default_mask_um")]
    pub mask_um_per_px: f64,
    #[serde(default = "ThresholdParams::default_s_min")]
    pub s_min: f64,
    #[serde(default = "ThresholdParams::default_l_max")]
    pub l_max: f64,
}

impl Default for TileSection {
    fn default() -> Self {
        TileSection {
            edge_px: default_edge(),
            target_um_per_px: default_target_um(),
            overlap_px: 0,
            min_tissue_fraction: default_min_tissue(),
            mask_um_per_px: default_mask_um(),
            s_min: ThresholdParams::default_s_min(),
            l_max: ThresholdParams::default_l_max(),
        }
    }
}

fn default_cv_folds() -> u32 {
    10
}
fn default_fraction() -> f64 {
    1.0
}
fn default_toy_embed() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(flatten)]
    pub optimizer: TrainConfig,
    #[serde(default = "TrainSection::default_mode")]
    pub encoder_mode: EncoderMode,
    /// Embedding width for the toy encoder; frozen mode reads the width
    /// from the embedding files.
    #[serde(default = "default_toy_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: u32,
    /// Fraction of development patients used for training, sampled
    /// cumulatively at patient level.
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
}

impl TrainSection {
    fn default_mode() -> EncoderMode {
        EncoderMode::FrozenFile
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            optimizer: TrainConfig::default(),
            encoder_mode: Self::default_mode(),
            embed_dim: default_toy_embed(),
            cv_folds: default_cv_folds(),
            train_fraction: default_fraction(),
        }
    }
}

fn default_tta() -> u32 {
    3
}
fn default_replicates() -> u32 {
    1000
}
fn default_eval_splits() -> Vec<Split> {
    vec![
        Split::Tuning,
        Split::InternalValidation,
        Split::ExternalValidation,
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceSection {
    #[serde(default = "default_tta")]
    pub tta_runs: u32,
    #[serde(default = "default_replicates")]
    pub bootstrap_replicates: u32,
    #[serde(default = "default_eval_splits")]
    pub splits: Vec<Split>,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            tta_runs: default_tta(),
            bootstrap_replicates: default_replicates(),
            splits: default_eval_splits(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyLogEntry {
    pub label: String,
    pub path: PathBuf,
}

fn default_ensemble_size() -> u32 {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergySection {
    pub logs: Vec<EnergyLogEntry>,
    pub slide_count: usize,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: u32,
    #[serde(default = "default_tta")]
    pub tta_runs: u32,
    pub baseline: String,
}

/// The one configuration file all subcommands share.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub tile: TileSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub energy: Option<EnergySection>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if let Ok(seed) = std::env::var("GMB_SEED") {
            config.seed = seed.parse().map_err(|_| CliError::Config {
                path: path.display().to_string(),
                message: format!("GMB_SEED={seed} is not an integer"),
            })?;
        }
        config.synth.get_or_insert_with(SynthConfig::default).seed = config.seed;
        config.train.optimizer.seed = config.seed;
        Ok(config)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gmb",
    about = "Desk-scale gated-attention MIL grading bench",
    version
)]
pub struct Cli {
    /// Cap the worker thread pool.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort (rasters, manifest, oracle embeddings).
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check manifest integrity; optionally apply the exclusion rules.
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Write the cleaned manifest and exclusion log, and validate the
        /// cleaned manifest instead.
        #[arg(long)]
        apply_exclusions: bool,
    },
    /// Convert rasters into patch record files, one per WSI.
    Tile {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the cross-validated ensemble.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured fraction of development patients.
        #[arg(long)]
        train_fraction: Option<f64>,
        /// Override the configured number of CV folds.
        #[arg(long)]
        folds: Option<u32>,
    },
    /// Ensemble + TTA predictions for every evaluation unit.
    Predict {
        #[arg(long)]
        config: PathBuf,
        /// Additionally export a per-patch heatmap for this WSI id.
        #[arg(long)]
        heatmap_wsi: Option<String>,
    },
    /// Metric report with bootstrap confidence intervals.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Clinically-significant-error audit of one or more prediction files.
    Audit {
        #[arg(long)]
        config: PathBuf,
        /// Prediction files to audit (defaults to the predict output).
        #[arg(long)]
        predictions: Vec<PathBuf>,
    },
    /// Energy/runtime accounting from power logs.
    Energy {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Run a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32, CliError> {
    if let Some(threads) = cli.threads {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match cli.command {
        Command::Synth { config } => cmd_synth(&RunConfig::load(&config)?),
        Command::Validate {
            config,
            apply_exclusions,
        } => cmd_validate(&RunConfig::load(&config)?, apply_exclusions),
        Command::Tile { config } => cmd_tile(&RunConfig::load(&config)?),
        Command::Train {
            config,
            train_fraction,
            folds,
        } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(f) = train_fraction {
                config.train.train_fraction = f;
            }
            if let Some(k) = folds {
                config.train.cv_folds = k;
            }
            cmd_train(&config)
        }
        Command::Predict {
            config,
            heatmap_wsi,
        } => cmd_predict(&RunConfig::load(&config)?, heatmap_wsi.as_deref()),
        Command::Evaluate { config } => cmd_evaluate(&RunConfig::load(&config)?),
        Command::Audit {
            config,
            predictions,
        } => cmd_audit(&RunConfig::load(&config)?, &predictions),
        Command::Energy { config } => cmd_energy(&RunConfig::load(&config)?),
    }
}

pub fn cmd_synth(config: &RunConfig) -> Result<i32, CliError> {
    let synth_cfg = config.synth.clone().unwrap_or_default();
    let paths = SynthPaths {
        raster_dir: config.paths.raster_dir.clone(),
        embed_dir: config.paths.embed_dir.clone(),
        truth_dir: config.paths.truth_dir.clone(),
        manifest_path: config.paths.manifest.clone(),
    };
    let summary = generate(&synth_cfg, &paths)?;
    eprintln!(
        "synth: {} patients, {} slides, {} WSIs",
        summary.patients, summary.slides, summary.wsis
    );
    Ok(0)
}

pub fn cmd_validate(config: &RunConfig, with_exclusions: bool) -> Result<i32, CliError> {
    let manifest = CohortManifest::load(&config.paths.manifest)?;
    let target = if with_exclusions {
        let (cleaned, log) = apply_exclusions(&manifest);
        write_file(
            &config.paths.report_dir.join("exclusions.jsonl"),
            &log.to_jsonl(),
        )?;
        let cleaned_path = config.paths.report_dir.join("manifest.clean.csv");
        cleaned.save(&cleaned_path)?;
        eprintln!(
            "validate: {} rows excluded, cleaned manifest at {}",
            log.entries.len(),
            cleaned_path.display()
        );
        cleaned
    } else {
        manifest
    };
    let violations = validate_manifest(&target);
    let json = serde_json::to_string_pretty(&violations).expect("serializable violations");
    write_file(&config.paths.report_dir.join("violations.json"), &json)?;
    if violations.is_empty() {
        Ok(0)
    } else {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        Ok(1)
    }
}

pub fn cmd_tile(config: &RunConfig) -> Result<i32, CliError> {
    let manifest = CohortManifest::load(&config.paths.manifest)?;
    let index = manifest.index()?;
    std::fs::create_dir_all(&config.paths.patch_dir).map_err(|source| CliError::Io {
        path: config.paths.patch_dir.display().to_string(),
        source,
    })?;
    let tile = &config.tile;
    let params = ThresholdParams {
        s_min: tile.s_min,
        l_max: tile.l_max,
    };
    let wsis: Vec<_> = index.wsis.values().collect();
    let results: Vec<Result<usize, CliError>> = wsis
        .par_iter()
        .map(|wsi| {
            let sidecar = config
                .paths
                .raster_dir
                .join(format!("{}.json", wsi.source_filename));
            let pyramid = load_pyramid(&sidecar)?;
            // Tissue is detected on a coarse rendering of the raster.
            let (finest, finest_um) = &pyramid.levels[0];
            let mask_frame = if tile.mask_um_per_px > *finest_um {
                resample_lanczos(finest, *finest_um, tile.mask_um_per_px)?
            } else {
                finest.clone()
            };
            let mask =
                segment_tissue_threshold(&mask_frame, tile.mask_um_per_px.max(*finest_um), params)?;
            let records = extract_patch_grid(
                &pyramid,
                &mask,
                tile.edge_px,
                tile.target_um_per_px,
                tile.overlap_px,
                tile.min_tissue_fraction,
            )?;
            let out = config.paths.patch_dir.join(format!("{}.gpr", wsi.wsi_id));
            write_patch_records(&out, &records)?;
            Ok(records.len())
        })
        .collect();
    let mut total = 0usize;
    for r in results {
        total += r?;
    }
    eprintln!("tile: {} WSIs, {} patches", wsis.len(), total);
    Ok(0)
}

/// Development patients to keep for a cumulative train fraction.
fn fraction_patients(
    index: &crate::manifest::ManifestIndex,
    fraction: f64,
    seed: u64,
) -> Vec<String> {
    let mut dev: Vec<String> = index
        .patients
        .values()
        .filter(|p| p.split == Split::Development)
        .map(|p| p.patient_id.clone())
        .collect();
    dev.sort();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xf2ac);
    dev.shuffle(&mut rng);
    let keep = ((dev.len() as f64) * fraction).ceil().max(1.0) as usize;
    dev.truncate(keep.min(dev.len()));
    dev
}

fn encoder_spec(config: &RunConfig) -> Result<EncoderSpec, CliError> {
    match config.train.encoder_mode {
        EncoderMode::TrainableToy => Ok(EncoderSpec::toy(config.train.embed_dim)),
        EncoderMode::FrozenFile => {
            // The embedding width comes from the files themselves.
            let mut entries: Vec<_> = std::fs::read_dir(&config.paths.embed_dir)
                .map_err(|source| CliError::Io {
                    path: config.paths.embed_dir.display().to_string(),
                    source,
                })?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "gem"))
                .collect();
            entries.sort();
            let first = entries.first().ok_or_else(|| {
                CliError::Misuse(format!(
                    "no .gem embedding files in {}",
                    config.paths.embed_dir.display()
                ))
            })?;
            let file = read_embeddings(first)?;
            Ok(EncoderSpec::frozen(file.embed_dim))
        }
    }
}

pub fn cmd_train(config: &RunConfig) -> Result<i32, CliError> {
    let manifest = CohortManifest::load(&config.paths.manifest)?;
    let manifest = if config.train.train_fraction < 1.0 {
        let index = manifest.index()?;
        let keep = fraction_patients(&index, config.train.train_fraction, config.seed);
        let keep: std::collections::BTreeSet<String> = keep.into_iter().collect();
        let rows = manifest
            .rows
            .iter()
            .filter(|row| {
                if row.split != Split::Development.as_str() {
                    return true;
                }
                let (pid, _, _) = row.ids().expect("indexed manifest rows hash");
                keep.contains(&pid)
            })
            .cloned()
            .collect();
        CohortManifest::new(rows)
    } else {
        manifest
    };
    let index = manifest.index()?;
    // Folds must exist in the manifest before they can be trained.
    let assigned_folds = index
        .patients
        .values()
        .filter_map(|p| p.cv_fold)
        .max()
        .map(|f| f + 1)
        .unwrap_or(0);
    if config.train.cv_folds > assigned_folds {
        return Err(CliError::Misuse(format!(
            "config asks for {} folds but the manifest assigns only {assigned_folds}",
            config.train.cv_folds
        )));
    }
    let spec = encoder_spec(config)?;
    let loader = BagLoader::new(
        config.train.encoder_mode,
        &config.paths.patch_dir,
        &config.paths.embed_dir,
    );
    let ensemble = train_cv(
        &index,
        &loader,
        &spec,
        config.train.cv_folds,
        &config.train.optimizer,
    )?;
    ensemble.save(&config.paths.checkpoint_dir)?;
    std::fs::create_dir_all(&config.paths.report_dir).map_err(|source| CliError::Io {
        path: config.paths.report_dir.display().to_string(),
        source,
    })?;
    let logs: Vec<_> = ensemble.folds.iter().flat_map(|f| f.log.clone()).collect();
    crate::train::write_training_log(&config.paths.report_dir.join("training_log.csv"), &logs)?;
    for fold in &ensemble.folds {
        eprintln!(
            "train: fold {} best qwk {:.4} at epoch {}",
            fold.fold, fold.best_qwk, fold.best_epoch
        );
    }
    Ok(0)
}

/// Units of the evaluation splits.
fn evaluation_units(
    config: &RunConfig,
    index: &crate::manifest::ManifestIndex,
) -> Result<Vec<PredictionUnit>, CliError> {
    let keep: std::collections::BTreeSet<String> = index
        .patients
        .values()
        .filter(|p| config.inference.splits.contains(&p.split))
        .flat_map(|p| p.slide_ids.iter().cloned())
        .collect();
    let units = group_units(index)?
        .into_iter()
        .filter(|unit| {
            unit.wsi_ids.iter().any(|wsi_id| {
                index
                    .wsis
                    .get(wsi_id)
                    .map(|w| keep.contains(&w.slide_id))
                    .unwrap_or(false)
            })
        })
        .collect();
    Ok(units)
}

pub fn cmd_predict(config: &RunConfig, heatmap_wsi: Option<&str>) -> Result<i32, CliError> {
    let manifest = CohortManifest::load(&config.paths.manifest)?;
    let index = manifest.index()?;
    let ensemble = EnsembleCheckpoint::load(&config.paths.checkpoint_dir)?;
    let models = ensemble.models();
    let loader = BagLoader::new(
        config.train.encoder_mode,
        &config.paths.patch_dir,
        &config.paths.embed_dir,
    );
    let units = evaluation_units(config, &index)?;
    let records: Vec<_> = units
        .par_iter()
        .map(|unit| {
            predict_unit(
                &models,
                unit,
                &loader,
                config.inference.tta_runs,
                config.seed,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_file(
        &config.paths.report_dir.join("predictions.csv"),
        &predictions_csv(&records),
    )?;
    eprintln!(
        "predict: {} units, {} models x {} TTA",
        records.len(),
        models.len(),
        config.inference.tta_runs
    );

    if let Some(wsi_id) = heatmap_wsi {
        let gpr = config.paths.patch_dir.join(format!("{wsi_id}.gpr"));
        let records = crate::tile::read_patch_records(&gpr)?;
        let embeddings = match config.train.encoder_mode {
            EncoderMode::FrozenFile => Some(read_embeddings(
                &config.paths.embed_dir.join(format!("{wsi_id}.gem")),
            )?),
            EncoderMode::TrainableToy => None,
        };
        let rows = heatmap(models[0], &records, embeddings.as_ref())?;
        write_file(
            &config
                .paths
                .report_dir
                .join(format!("heatmap_{wsi_id}.csv")),
            &heatmap_csv(&rows),
        )?;
    }
    Ok(0)
}

pub fn cmd_evaluate(config: &RunConfig) -> Result<i32, CliError> {
    let manifest = CohortManifest::load(&config.paths.manifest)?;
    let index = manifest.index()?;
    let predictions = read_predictions(&config.paths.report_dir.join("predictions.csv"))?;
    let units: BTreeMap<String, PredictionUnit> = evaluation_units(config, &index)?
        .into_iter()
        .map(|u| (u.unit_key.clone(), u))
        .collect();
    let mut cases = Vec::with_capacity(predictions.len());
    for record in &predictions {
        let unit = units.get(&record.unit_key).ok_or_else(|| {
            CliError::Misuse(format!("prediction for unknown unit {}", record.unit_key))
        })?;
        cases.push(EvalCase {
            unit_key: record.unit_key.clone(),
            cohort: unit.cohort.clone(),
            level: unit.level.to_string(),
            reference_gs: unit.reference.score.map(|s| encode_gs_ordinal(s).value()),
            reference_isup: unit.reference.isup.grade(),
            predicted_gs: encode_gs_ordinal(record.winner).value(),
            predicted_isup: record.winner_isup.grade(),
            malignancy: record.malignancy,
        });
    }
    let report = evaluate_cohorts(&cases, config.inference.bootstrap_replicates, config.seed)?;
    write_file(
        &config.paths.report_dir.join("evaluation.json"),
        &report.to_json(),
    )?;
    write_file(
        &config.paths.report_dir.join("metrics.csv"),
        &report.metrics_csv(),
    )?;
    for cohort in &report.cohorts {
        eprintln!(
            "evaluate: {}/{} n={} qwk_isup={}",
            cohort.cohort,
            cohort.level,
            cohort.n_units,
            cohort
                .qwk_isup
                .map(|e| format!("{:.4} [{:.4}, {:.4}]", e.point, e.lower, e.upper))
                .unwrap_or_else(|| "undefined".into())
        );
    }
    Ok(0)
}

pub fn cmd_audit(config: &RunConfig, prediction_files: &[PathBuf]) -> Result<i32, CliError> {
    let manifest = CohortManifest::load(&config.paths.manifest)?;
    let index = manifest.index()?;
    let units: BTreeMap<String, PredictionUnit> = evaluation_units(config, &index)?
        .into_iter()
        .map(|u| (u.unit_key.clone(), u))
        .collect();
    let default_path = config.paths.report_dir.join("predictions.csv");
    let files: Vec<PathBuf> = if prediction_files.is_empty() {
        vec![default_path]
    } else {
        prediction_files.to_vec()
    };
    let mut tables = Vec::new();
    for file in &files {
        let predictions = read_predictions(file)?;
        let mut cases = Vec::new();
        for record in &predictions {
            let unit = units.get(&record.unit_key).ok_or_else(|| {
                CliError::Misuse(format!("prediction for unknown unit {}", record.unit_key))
            })?;
            cases.push((
                record.unit_key.clone(),
                unit.reference.isup,
                record.winner_isup,
            ));
        }
        tables.push(significant_error_audit(&cases));
    }
    write_file(
        &config.paths.report_dir.join("audit.csv"),
        &tables[0].to_csv(),
    )?;
    #[derive(Serialize)]
    struct AuditSummary<'a> {
        files: Vec<String>,
        rates: Vec<f64>,
        error_counts: Vec<usize>,
        evaluated: Vec<usize>,
        common_errors: &'a [String],
    }
    let common = audit_intersection(&tables);
    let summary = AuditSummary {
        files: files.iter().map(|p| p.display().to_string()).collect(),
        rates: tables.iter().map(|t| t.rate).collect(),
        error_counts: tables.iter().map(|t| t.rows.len()).collect(),
        evaluated: tables.iter().map(|t| t.evaluated).collect(),
        common_errors: &common,
    };
    write_file(
        &config.paths.report_dir.join("audit.json"),
        &serde_json::to_string_pretty(&summary).expect("serializable summary"),
    )?;
    for (file, table) in files.iter().zip(&tables) {
        eprintln!(
            "audit: {} -> {} errors / {} slides ({:.2}%)",
            file.display(),
            table.rows.len(),
            table.evaluated,
            table.rate * 100.0
        );
    }
    Ok(0)
}

pub fn cmd_energy(config: &RunConfig) -> Result<i32, CliError> {
    let section = config
        .energy
        .as_ref()
        .ok_or_else(|| CliError::Misuse("config has no energy section".into()))?;
    let mut logs = Vec::new();
    for entry in &section.logs {
        logs.push(PowerLog::load_csv(&entry.path, &entry.label)?);
    }
    let report = energy_report(
        &logs,
        section.slide_count,
        section.ensemble_size,
        section.tta_runs,
        &section.baseline,
    )?;
    write_file(
        &config.paths.report_dir.join("energy.json"),
        &serde_json::to_string_pretty(&report).expect("serializable report"),
    )?;
    for device in &report.devices {
        eprintln!(
            "energy: {} {:.3} kWh, {:.3} Wh/biopsy, x{:.2} vs {}",
            device.label,
            device.total_kwh,
            device.wh_per_biopsy,
            device.ratio_vs_baseline,
            report.baseline
        );
    }
    Ok(0)
}
