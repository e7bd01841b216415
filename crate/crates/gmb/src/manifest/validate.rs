//! Manifest integrity checks.
//!
//! Six categories of violation, each detected independently so that one
//! planted defect surfaces exactly once:
//!
//! (a) id uniqueness/unambiguity, (b) patient-level field consistency,
//! (c) slide-level consistency across rescanned WSIs, (d) valid values,
//! (e) GS/ISUP logical mismatches, (f) cross-partition patient overlap,
//! including overlap between CV folds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use super::{CohortManifest, LabelLevel, ManifestRow, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCategory {
    IdUniqueness,
    PatientConsistency,
    SlideConsistency,
    InvalidValue,
    LabelMismatch,
    PartitionOverlap,
}

impl fmt::Display for ViolationCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationCategory::IdUniqueness => "id-uniqueness",
            ViolationCategory::PatientConsistency => "patient-consistency",
            ViolationCategory::SlideConsistency => "slide-consistency",
            ViolationCategory::InvalidValue => "invalid-value",
            ViolationCategory::LabelMismatch => "label-mismatch",
            ViolationCategory::PartitionOverlap => "partition-overlap",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub category: ViolationCategory,
    /// Short machine-readable rule tag, e.g. "stale-rescan".
    pub rule: String,
    /// The offending id (hashed where available, else a row locator).
    pub subject: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}/{}] {}: {}",
            self.category, self.rule, self.subject, self.detail
        )
    }
}

fn row_locator(row: &ManifestRow) -> String {
    format!("{}/{}/{}", row.cohort, row.original_slide_id, row.filename)
}

fn has_missing_id_fields(row: &ManifestRow) -> bool {
    row.cohort.is_empty()
        || row.original_patient_id.is_empty()
        || row.original_slide_id.is_empty()
        || row.filename.is_empty()
        || row.scanner_serial.is_empty()
        || row.scan_timestamp.is_empty()
}

/// Return every violation in the manifest; an empty list means clean.
pub fn validate_manifest(manifest: &CohortManifest) -> Vec<Violation> {
    let mut violations = Vec::new();

    // Rows with complete id fields get hashed ids; the rest are reported
    // under (a) and skipped by the aggregate checks.
    let mut ids = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        if has_missing_id_fields(row) {
            violations.push(Violation {
                category: ViolationCategory::IdUniqueness,
                rule: "missing-id".into(),
                subject: row_locator(row),
                detail: "row lacks one or more identifier fields".into(),
            });
            ids.push(None);
        } else {
            ids.push(Some(row.ids().expect("non-empty fields hash")));
        }
    }

    // (a) duplicate wsi ids.
    let mut by_wsi: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        if let Some((_, _, wsi_id)) = id {
            by_wsi.entry(wsi_id).or_default().push(i);
        }
    }
    for (wsi_id, rows) in &by_wsi {
        if rows.len() > 1 {
            violations.push(Violation {
                category: ViolationCategory::IdUniqueness,
                rule: "duplicate-id".into(),
                subject: (*wsi_id).to_string(),
                detail: format!("{} rows share this wsi_id", rows.len()),
            });
        }
    }

    // (a) a slide mapping to more than one patient is an ambiguous linkage.
    let mut slide_patients: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut slide_rows: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        if let Some((patient_id, slide_id, _)) = id {
            slide_patients
                .entry(slide_id)
                .or_default()
                .insert(patient_id);
            slide_rows.entry(slide_id).or_default().push(i);
        }
    }
    let mut ambiguous_slides: BTreeSet<&str> = BTreeSet::new();
    for (slide_id, patients) in &slide_patients {
        if patients.len() > 1 {
            ambiguous_slides.insert(slide_id);
            violations.push(Violation {
                category: ViolationCategory::IdUniqueness,
                rule: "ambiguous-id".into(),
                subject: (*slide_id).to_string(),
                detail: format!("slide maps to {} patients", patients.len()),
            });
        }
    }

    // (d) per-row value checks.
    for row in &manifest.rows {
        let locator = row_locator(row);
        let mut invalid = |rule: &str, detail: String| {
            violations.push(Violation {
                category: ViolationCategory::InvalidValue,
                rule: rule.into(),
                subject: locator.clone(),
                detail,
            });
        };
        let split: Option<Split> = row.split.parse().ok();
        if split.is_none() {
            invalid("invalid-split", format!("split {:?}", row.split));
        }
        match row.pixel_size_um.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => {}
            _ => invalid(
                "invalid-pixel-size",
                format!("pixel_size_um {:?}", row.pixel_size_um),
            ),
        }
        match split {
            Some(Split::Development) => {
                if row.cv_fold.is_empty() || row.cv_fold.parse::<u32>().is_err() {
                    invalid(
                        "fold-assignment",
                        format!(
                            "development row needs an integer cv_fold, found {:?}",
                            row.cv_fold
                        ),
                    );
                }
            }
            Some(_) if !row.cv_fold.is_empty() => {
                invalid(
                    "fold-assignment",
                    format!(
                        "cv_fold {:?} set outside the development split",
                        row.cv_fold
                    ),
                );
            }
            Some(_) => {}
            None => {}
        }
        // Label syntax. Partial scores get their own tag, mirroring the
        // protocol's "partial or erroneous GS reporting" exclusion.
        if let Err(message) = row.reference() {
            if message.contains("partial") {
                invalid("partial-gs", message);
            } else {
                invalid("invalid-label", message);
            }
        }
    }

    // (e) logical mismatches on rows whose labels parse.
    for row in &manifest.rows {
        if let Ok(Some(label)) = row.reference() {
            if let Some(score) = label.score {
                let derived = crate::grading::gs_to_isup(score);
                if derived != label.isup {
                    let rule = if label.isup.is_benign() {
                        "benign-with-score"
                    } else {
                        "gs-isup-mismatch"
                    };
                    violations.push(Violation {
                        category: ViolationCategory::LabelMismatch,
                        rule: rule.into(),
                        subject: row_locator(row),
                        detail: format!(
                            "score {score} implies ISUP {derived}, row says {}",
                            label.isup
                        ),
                    });
                }
            }
        }
    }

    // (c) slide-level consistency across rescans, skipping slides already
    // reported as ambiguous under (a).
    for (slide_id, rows) in &slide_rows {
        if rows.len() < 2 || ambiguous_slides.contains(slide_id) {
            continue;
        }
        let labels: BTreeSet<(String, String, String, String, String)> = rows
            .iter()
            .map(|&i| {
                let r = &manifest.rows[i];
                (
                    r.label_level.clone(),
                    r.gleason_primary.clone(),
                    r.gleason_secondary.clone(),
                    r.isup.clone(),
                    r.group_key.clone(),
                )
            })
            .collect();
        if labels.len() > 1 {
            violations.push(Violation {
                category: ViolationCategory::SlideConsistency,
                rule: "slide-label-consistency".into(),
                subject: (*slide_id).to_string(),
                detail: format!("{} distinct label tuples across rescans", labels.len()),
            });
        }
        // Stale rescans: multiple timestamps on the same physical scanner.
        let mut by_serial: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for &i in rows {
            let r = &manifest.rows[i];
            by_serial
                .entry(r.scanner_serial.as_str())
                .or_default()
                .insert(r.scan_timestamp.as_str());
        }
        for (serial, stamps) in by_serial {
            if stamps.len() > 1 {
                violations.push(Violation {
                    category: ViolationCategory::SlideConsistency,
                    rule: "stale-rescan".into(),
                    subject: format!("{slide_id}@{serial}"),
                    detail: format!(
                        "{} scans on one instrument; only the latest should remain",
                        stamps.len()
                    ),
                });
            }
        }
    }

    // (b) patient-level label consistency: patient-scoped labels must agree
    // across all of that patient's rows.
    let mut patient_labels: BTreeMap<&str, BTreeSet<(String, String, String, String)>> =
        BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        if let Some((patient_id, _, _)) = id {
            let row = &manifest.rows[i];
            if row.label_level == LabelLevel::Patient.as_str() {
                patient_labels.entry(patient_id).or_default().insert((
                    row.gleason_primary.clone(),
                    row.gleason_secondary.clone(),
                    row.isup.clone(),
                    row.group_key.clone(),
                ));
            }
        }
    }
    for (patient_id, labels) in patient_labels {
        if labels.len() > 1 {
            violations.push(Violation {
                category: ViolationCategory::PatientConsistency,
                rule: "patient-label-consistency".into(),
                subject: patient_id.to_string(),
                detail: format!("{} distinct patient-level labels", labels.len()),
            });
        }
    }

    // (f) partition overlap, including CV fold overlap.
    let mut patient_splits: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut patient_folds: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        if let Some((patient_id, _, _)) = id {
            let row = &manifest.rows[i];
            patient_splits
                .entry(patient_id)
                .or_default()
                .insert(row.split.as_str());
            if row.split == Split::Development.as_str() && !row.cv_fold.is_empty() {
                patient_folds
                    .entry(patient_id)
                    .or_default()
                    .insert(row.cv_fold.as_str());
            }
        }
    }
    for (patient_id, splits) in patient_splits {
        if splits.len() > 1 {
            violations.push(Violation {
                category: ViolationCategory::PartitionOverlap,
                rule: "partition-overlap".into(),
                subject: patient_id.to_string(),
                detail: format!(
                    "patient appears in {} partitions: {}",
                    splits.len(),
                    splits.into_iter().collect::<Vec<_>>().join(", ")
                ),
            });
        }
    }
    for (patient_id, folds) in patient_folds {
        if folds.len() > 1 {
            violations.push(Violation {
                category: ViolationCategory::PartitionOverlap,
                rule: "fold-overlap".into(),
                subject: patient_id.to_string(),
                detail: format!("patient appears in {} cv folds", folds.len()),
            });
        }
    }

    violations
}
