//! gmb — a desk-scale, fully testable Gleason grading bench.
//!
//! The crate implements a weakly supervised grading pipeline for prostate
//! biopsy rasters: tissue tiling into patch record files, a gated
//! attention-based multiple-instance-learning (MIL) model with two
//! Gleason-pattern heads, confounder-aware training with cross-validation,
//! ensemble + test-time-augmentation inference, and the statistical and
//! energy-accounting harness used to evaluate the results.
//!
//! Everything runs on synthetic desk-scale cohorts produced by
//! [`synth::generate`]; no vendor slide formats or GPU frameworks are
//! involved. The `gmb` binary wires the modules into a workflow:
//!
//! ```text
//! gmb synth    -> cohort on disk (rasters, manifest, oracle embeddings)
//! gmb validate -> manifest integrity report
//! gmb tile     -> patch record files, one per WSI
//! gmb train    -> per-fold checkpoints + ensemble metadata
//! gmb predict  -> per-unit majority-vote grades
//! gmb evaluate -> metric report with bootstrap confidence intervals
//! gmb audit    -> clinically significant error table
//! gmb energy   -> energy/runtime accounting from power logs
//! ```
//!
//! The grading domain is small enough to show here in full:
//!
//! ```
//! use gmb::grading::{correct_pattern_pair, gs_to_isup, GleasonPattern, GleasonScore};
//!
//! // A raw model output of (benign, pattern 4) is corrected by duplicating
//! // the non-zero pattern before any encoding happens.
//! let raw_primary = GleasonPattern::new(0).unwrap();
//! let raw_secondary = GleasonPattern::new(2).unwrap(); // pattern 4
//! let score = correct_pattern_pair(raw_primary, raw_secondary);
//! assert_eq!(score.to_string(), "4+4");
//! assert_eq!(gs_to_isup(score).grade(), 4);
//!
//! // Clinical notation parses and normalizes the same way.
//! let gs: GleasonScore = "3+4".parse().unwrap();
//! assert_eq!(gs_to_isup(gs).grade(), 2);
//! ```

pub mod cli;
pub mod energy;
pub mod grading;
pub mod infer;
pub mod manifest;
pub mod md5;
pub mod model;
pub mod stats;
pub mod synth;
pub mod tile;
pub mod train;
