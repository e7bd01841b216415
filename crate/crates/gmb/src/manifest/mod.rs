//! Cohort data model and verification.
//!
//! A manifest is a UTF-8 CSV with a versioned header and one row per WSI.
//! Rows are kept as raw text after structural parsing: content problems
//! (bad grades, mismatched labels, overlapped partitions) are reported by
//! [`validate_manifest`] or dropped by [`apply_exclusions`] rather than
//! thrown, mirroring how real cohort tables are cleaned. The typed view
//! ([`ManifestIndex`]) is built after cleaning and resolves every foreign
//! key or fails.
//!
//! Identifiers are MD5 hashes over pipe-joined source fields so that
//! per-site pseudonymous IDs can never collide across cohorts.

mod exclude;
mod folds;
mod validate;

pub use exclude::{apply_exclusions, ExclusionEntry, ExclusionLog};
pub use folds::make_cv_folds;
pub use validate::{validate_manifest, Violation, ViolationCategory};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::grading::{gs_to_isup, GleasonScore, IsupGrade};
use crate::md5::md5_hex;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} is not a gmb manifest: {message}")]
    Header { path: String, message: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("empty field {field} in id computation")]
    EmptyIdField { field: &'static str },
    #[error("manifest is not clean: {0}; run validate/exclusions first")]
    Inconsistent(String),
    #[error("cv folds: {0}")]
    Folds(String),
}

pub const MANIFEST_HEADER: &str = "#gmb-manifest v1";

/// Data partitions of the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Development,
    Tuning,
    InternalValidation,
    ExternalValidation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Development => "development",
            Split::Tuning => "tuning",
            Split::InternalValidation => "internal_validation",
            Split::ExternalValidation => "external_validation",
        }
    }
}

impl FromStr for Split {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "development" => Ok(Split::Development),
            "tuning" => Ok(Split::Tuning),
            "internal_validation" => Ok(Split::InternalValidation),
            "external_validation" => Ok(Split::ExternalValidation),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Granularity of a reference-standard label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelLevel {
    Slide,
    Location,
    Patient,
}

impl LabelLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelLevel::Slide => "slide",
            LabelLevel::Location => "location",
            LabelLevel::Patient => "patient",
        }
    }
}

impl FromStr for LabelLevel {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "slide" => Ok(LabelLevel::Slide),
            "location" => Ok(LabelLevel::Location),
            "patient" => Ok(LabelLevel::Patient),
            _ => Err(()),
        }
    }
}

impl fmt::Display for LabelLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One CSV row; fields stay textual until validation has run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub cohort: String,
    pub original_patient_id: String,
    pub original_slide_id: String,
    pub filename: String,
    pub scanner_vendor: String,
    pub scanner_model: String,
    pub scanner_serial: String,
    pub scan_timestamp: String,
    pub pixel_size_um: String,
    pub label_level: String,
    pub gleason_primary: String,
    pub gleason_secondary: String,
    pub isup: String,
    pub group_key: String,
    pub split: String,
    pub cv_fold: String,
}

impl ManifestRow {
    /// Hashed (patient_id, slide_id, wsi_id) for this row.
    pub fn ids(&self) -> Result<(String, String, String), ManifestError> {
        compute_ids(
            &self.cohort,
            &self.original_patient_id,
            &self.original_slide_id,
            &self.filename,
            &self.scanner_serial,
            &self.scan_timestamp,
        )
    }

    /// Parse the reference-label columns. `Ok(None)` means unlabeled;
    /// errors describe why the label text is unusable.
    pub fn reference(&self) -> Result<Option<ReferenceLabel>, String> {
        if self.label_level.is_empty() {
            if !self.gleason_primary.is_empty()
                || !self.gleason_secondary.is_empty()
                || !self.isup.is_empty()
            {
                return Err("label fields present without a label_level".into());
            }
            return Ok(None);
        }
        let level: LabelLevel = self
            .label_level
            .parse()
            .map_err(|_| format!("invalid label_level {:?}", self.label_level))?;
        let isup: IsupGrade = self
            .isup
            .parse()
            .map_err(|_| format!("invalid isup {:?}", self.isup))?;
        let score = match (
            self.gleason_primary.is_empty(),
            self.gleason_secondary.is_empty(),
        ) {
            (true, true) => None,
            (false, false) => {
                let text = format!("{}+{}", self.gleason_primary, self.gleason_secondary);
                Some(
                    text.parse::<GleasonScore>()
                        .map_err(|e| format!("invalid gleason score {text:?}: {e}"))?,
                )
            }
            _ => return Err("partial gleason score".into()),
        };
        match level {
            LabelLevel::Slide => {
                if !self.group_key.is_empty() {
                    return Err("slide-level label must not carry a group_key".into());
                }
            }
            _ => {
                if self.group_key.is_empty() {
                    return Err(format!("{level} label requires a group_key"));
                }
            }
        }
        Ok(Some(ReferenceLabel {
            level,
            score,
            isup,
            group_key: self.group_key.clone(),
        }))
    }
}

/// A parsed reference-standard label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceLabel {
    pub level: LabelLevel,
    pub score: Option<GleasonScore>,
    pub isup: IsupGrade,
    /// Location or patient pooling key; empty for slide-level labels.
    pub group_key: String,
}

impl ReferenceLabel {
    /// The label's internal consistency: a present score must map onto the
    /// stated grade, and benign labels cannot carry a non-benign score.
    pub fn check_consistent(&self) -> Result<(), String> {
        if let Some(score) = self.score {
            let derived = gs_to_isup(score);
            if derived != self.isup {
                return Err(format!(
                    "score {score} maps to ISUP {derived}, row says ISUP {}",
                    self.isup
                ));
            }
        } else if !self.isup.is_benign() {
            // Grade-only labels (no score reported) are legitimate: several
            // cohorts report only the ISUP grade.
        }
        Ok(())
    }
}

/// The manifest: raw rows plus the operations defined on them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortManifest {
    pub rows: Vec<ManifestRow>,
}

impl CohortManifest {
    pub fn new(rows: Vec<ManifestRow>) -> Self {
        CohortManifest { rows }
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut lines = text.splitn(2, '\n');
        let header = lines.next().unwrap_or("").trim_end();
        if header != MANIFEST_HEADER {
            return Err(ManifestError::Header {
                path: path.display().to_string(),
                message: format!("expected version line {MANIFEST_HEADER:?}, found {header:?}"),
            });
        }
        let body = lines.next().unwrap_or("");
        let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let mut rows = Vec::new();
        for record in reader.deserialize() {
            rows.push(record?);
        }
        Ok(CohortManifest { rows })
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MANIFEST_HEADER.as_bytes());
        buf.push(b'\n');
        {
            let mut writer = csv::Writer::from_writer(&mut buf);
            for row in &self.rows {
                writer.serialize(row)?;
            }
            writer.flush().map_err(|source| ManifestError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        std::fs::write(path, buf).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Build the typed, fully-resolved view. Fails on rows that would leave
    /// dangling or contradictory references.
    pub fn index(&self) -> Result<ManifestIndex, ManifestError> {
        ManifestIndex::build(self)
    }
}

/// Hash the study identifiers. Fields are joined with a single `|` byte so
/// that ("ab", "c") and ("a", "bc") can never collide.
pub fn compute_ids(
    cohort: &str,
    original_patient_id: &str,
    original_slide_id: &str,
    filename: &str,
    scanner_serial: &str,
    timestamp: &str,
) -> Result<(String, String, String), ManifestError> {
    let require = |value: &str, field: &'static str| {
        if value.is_empty() {
            Err(ManifestError::EmptyIdField { field })
        } else {
            Ok(())
        }
    };
    require(cohort, "cohort")?;
    require(original_patient_id, "original_patient_id")?;
    require(original_slide_id, "original_slide_id")?;
    require(filename, "filename")?;
    require(scanner_serial, "scanner_serial")?;
    require(timestamp, "scan_timestamp")?;
    let patient_id = md5_hex(format!("{cohort}|{original_patient_id}").as_bytes());
    let slide_id = md5_hex(format!("{cohort}|{original_slide_id}").as_bytes());
    let wsi_id = md5_hex(format!("{filename}|{scanner_serial}|{timestamp}").as_bytes());
    Ok((patient_id, slide_id, wsi_id))
}

/// A WSI in the typed view.
#[derive(Debug, Clone, PartialEq)]
pub struct WsiRecord {
    pub wsi_id: String,
    pub slide_id: String,
    pub source_filename: String,
    pub scanner_vendor: String,
    pub scanner_model: String,
    pub scanner_serial: String,
    pub scan_timestamp: String,
    pub pixel_size_um: f64,
}

/// A glass slide with its label and the WSIs that digitize it.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub patient_id: String,
    pub cohort: String,
    pub original_slide_id: String,
    pub reference: Option<ReferenceLabel>,
    pub wsi_ids: Vec<String>,
}

/// A patient with partition assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub cohort: String,
    pub split: Split,
    pub cv_fold: Option<u32>,
    pub slide_ids: Vec<String>,
}

/// Fully-resolved manifest view keyed by hashed ids.
#[derive(Debug, Clone, Default)]
pub struct ManifestIndex {
    pub patients: BTreeMap<String, PatientRecord>,
    pub slides: BTreeMap<String, SlideRecord>,
    pub wsis: BTreeMap<String, WsiRecord>,
    /// serial -> (vendor, model)
    pub scanners: BTreeMap<String, (String, String)>,
}

impl ManifestIndex {
    fn build(manifest: &CohortManifest) -> Result<Self, ManifestError> {
        let mut index = ManifestIndex::default();
        for (i, row) in manifest.rows.iter().enumerate() {
            let (patient_id, slide_id, wsi_id) = row.ids()?;
            let reference = row
                .reference()
                .map_err(|e| ManifestError::Inconsistent(format!("row {i}: {e}")))?;
            let pixel_size_um: f64 = row
                .pixel_size_um
                .parse()
                .map_err(|_| ManifestError::Inconsistent(format!("row {i}: bad pixel size")))?;
            let split: Split = row
                .split
                .parse()
                .map_err(|_| ManifestError::Inconsistent(format!("row {i}: bad split")))?;
            let cv_fold =
                if row.cv_fold.is_empty() {
                    None
                } else {
                    Some(row.cv_fold.parse::<u32>().map_err(|_| {
                        ManifestError::Inconsistent(format!("row {i}: bad cv_fold"))
                    })?)
                };

            if index.wsis.contains_key(&wsi_id) {
                return Err(ManifestError::Inconsistent(format!(
                    "duplicate wsi_id {wsi_id}"
                )));
            }
            index.wsis.insert(
                wsi_id.clone(),
                WsiRecord {
                    wsi_id: wsi_id.clone(),
                    slide_id: slide_id.clone(),
                    source_filename: row.filename.clone(),
                    scanner_vendor: row.scanner_vendor.clone(),
                    scanner_model: row.scanner_model.clone(),
                    scanner_serial: row.scanner_serial.clone(),
                    scan_timestamp: row.scan_timestamp.clone(),
                    pixel_size_um,
                },
            );
            index
                .scanners
                .entry(row.scanner_serial.clone())
                .or_insert_with(|| (row.scanner_vendor.clone(), row.scanner_model.clone()));

            let slide = index
                .slides
                .entry(slide_id.clone())
                .or_insert_with(|| SlideRecord {
                    slide_id: slide_id.clone(),
                    patient_id: patient_id.clone(),
                    cohort: row.cohort.clone(),
                    original_slide_id: row.original_slide_id.clone(),
                    reference: reference.clone(),
                    wsi_ids: Vec::new(),
                });
            if slide.patient_id != patient_id {
                return Err(ManifestError::Inconsistent(format!(
                    "slide {slide_id} maps to two patients"
                )));
            }
            if slide.reference != reference {
                return Err(ManifestError::Inconsistent(format!(
                    "slide {slide_id} has inconsistent labels across rescans"
                )));
            }
            slide.wsi_ids.push(wsi_id);

            let patient =
                index
                    .patients
                    .entry(patient_id.clone())
                    .or_insert_with(|| PatientRecord {
                        patient_id: patient_id.clone(),
                        cohort: row.cohort.clone(),
                        split,
                        cv_fold,
                        slide_ids: Vec::new(),
                    });
            if patient.split != split {
                return Err(ManifestError::Inconsistent(format!(
                    "patient {patient_id} appears in multiple splits"
                )));
            }
            if patient.cv_fold != cv_fold {
                return Err(ManifestError::Inconsistent(format!(
                    "patient {patient_id} appears in multiple cv folds"
                )));
            }
            if !patient.slide_ids.contains(&slide_id) {
                patient.slide_ids.push(slide_id.clone());
            }
        }
        Ok(index)
    }

    /// Slides of development patients, each with its parsed label.
    pub fn development_slides(&self) -> Vec<&SlideRecord> {
        self.patients
            .values()
            .filter(|p| p.split == Split::Development)
            .flat_map(|p| p.slide_ids.iter())
            .filter_map(|sid| self.slides.get(sid))
            .collect()
    }

    /// Maximum labeled ISUP grade across a patient's slides, if any label
    /// exists.
    pub fn patient_max_isup(&self, patient: &PatientRecord) -> Option<IsupGrade> {
        patient
            .slide_ids
            .iter()
            .filter_map(|sid| self.slides.get(sid))
            .filter_map(|s| s.reference.as_ref().map(|r| r.isup))
            .max()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn basic_row(
        cohort: &str,
        patient: &str,
        slide: &str,
        file: &str,
        serial: &str,
        ts: &str,
        isup: &str,
        gs: (&str, &str),
        split: &str,
        fold: &str,
    ) -> ManifestRow {
        ManifestRow {
            cohort: cohort.into(),
            original_patient_id: patient.into(),
            original_slide_id: slide.into(),
            filename: file.into(),
            scanner_vendor: "SynthScan".into(),
            scanner_model: "S1".into(),
            scanner_serial: serial.into(),
            scan_timestamp: ts.into(),
            pixel_size_um: "1.0".into(),
            label_level: "slide".into(),
            gleason_primary: gs.0.into(),
            gleason_secondary: gs.1.into(),
            isup: isup.into(),
            group_key: String::new(),
            split: split.into(),
            cv_fold: fold.into(),
        }
    }

    #[test]
    fn compute_ids_is_deterministic_and_field_sensitive() {
        let a = compute_ids("C", "p", "s", "f", "x", "t").unwrap();
        let b = compute_ids("C", "p", "s", "f", "x", "t").unwrap();
        assert_eq!(a, b);
        for id in [&a.0, &a.1, &a.2] {
            assert_eq!(id.len(), 32);
            assert!(id.chars().all(|c| c.is_ascii_hexdigit()));
        }
        let c = compute_ids("C", "p2", "s", "f", "x", "t").unwrap();
        assert_ne!(a.0, c.0, "different patients hash differently");
        assert_eq!(a.1, c.1, "slide id ignores the patient field");

        // The separator prevents cross-field ambiguity.
        let d = compute_ids("Cp", "x", "s", "f", "x", "t").unwrap();
        let e = compute_ids("C", "px", "s", "f", "x", "t").unwrap();
        assert_ne!(d.0, e.0);
    }

    #[test]
    fn compute_ids_matches_reference_digest() {
        // Oracle: the digest definition itself, via the md5 module's
        // RFC-checked implementation on the documented byte string.
        let (pid, _, _) = compute_ids("C", "p", "s", "f", "x", "t").unwrap();
        assert_eq!(pid, crate::md5::md5_hex(b"C|p"));
    }

    #[test]
    fn compute_ids_rejects_empty_fields() {
        let err = compute_ids("C", "", "s", "f", "x", "t").unwrap_err();
        assert!(err.to_string().contains("original_patient_id"));
    }

    #[test]
    fn csv_round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let manifest = CohortManifest::new(vec![
            basic_row(
                "C",
                "p1",
                "s1",
                "f1.png",
                "SN1",
                "2024-01-01T00:00:00",
                "2",
                ("3", "4"),
                "development",
                "0",
            ),
            basic_row(
                "C",
                "p2",
                "s2",
                "f2.png",
                "SN1",
                "2024-01-01T00:00:01",
                "0",
                ("", ""),
                "internal_validation",
                "",
            ),
        ]);
        manifest.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(MANIFEST_HEADER));
        let back = CohortManifest::load(&path).unwrap();
        assert_eq!(back, manifest);

        std::fs::write(&path, text.replace(MANIFEST_HEADER, "#other v9")).unwrap();
        assert!(matches!(
            CohortManifest::load(&path),
            Err(ManifestError::Header { .. })
        ));
    }

    #[test]
    fn index_resolves_clean_manifest() {
        let manifest = CohortManifest::new(vec![
            basic_row(
                "C",
                "p1",
                "s1",
                "f1.png",
                "SN1",
                "t1",
                "2",
                ("3", "4"),
                "development",
                "0",
            ),
            basic_row(
                "C",
                "p1",
                "s1",
                "f2.png",
                "SN2",
                "t2",
                "2",
                ("3", "4"),
                "development",
                "0",
            ),
            basic_row(
                "C",
                "p2",
                "s2",
                "f3.png",
                "SN1",
                "t3",
                "0",
                ("", ""),
                "development",
                "1",
            ),
        ]);
        let index = manifest.index().unwrap();
        assert_eq!(index.patients.len(), 2);
        assert_eq!(index.slides.len(), 2);
        assert_eq!(index.wsis.len(), 3);
        assert_eq!(index.scanners.len(), 2);
        let (_, sid, _) = manifest.rows[0].ids().unwrap();
        assert_eq!(index.slides[&sid].wsi_ids.len(), 2);
    }

    #[test]
    fn index_rejects_contradictions() {
        // Same slide under two patients.
        let manifest = CohortManifest::new(vec![
            basic_row(
                "C",
                "p1",
                "s1",
                "f1.png",
                "SN1",
                "t1",
                "2",
                ("3", "4"),
                "development",
                "0",
            ),
            basic_row(
                "C",
                "p2",
                "s1",
                "f2.png",
                "SN1",
                "t2",
                "2",
                ("3", "4"),
                "development",
                "0",
            ),
        ]);
        assert!(manifest.index().is_err());
    }

    #[test]
    fn reference_label_consistency() {
        let row = basic_row("C", "p", "s", "f", "x", "t", "2", ("3", "4"), "tuning", "");
        let label = row.reference().unwrap().unwrap();
        assert!(label.check_consistent().is_ok());
        assert_eq!(label.isup.grade(), 2);

        let row = basic_row("C", "p", "s", "f", "x", "t", "0", ("4", "3"), "tuning", "");
        let label = row.reference().unwrap().unwrap();
        assert!(label.check_consistent().is_err());

        let mut row = basic_row("C", "p", "s", "f", "x", "t", "2", ("3", ""), "tuning", "");
        assert!(row.reference().is_err(), "partial score");
        row.label_level = String::new();
        row.gleason_secondary = String::new();
        row.gleason_primary = String::new();
        assert!(row.reference().is_err(), "isup without level");
        row.isup = String::new();
        assert_eq!(row.reference().unwrap(), None);
    }
}
