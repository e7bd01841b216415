//! Protocol exclusions expressible at manifest level.
//!
//! Drops rows with missing or ambiguous identifiers, invalid values,
//! partial or mismatched grading, and earlier scans of a slide on the same
//! scanner instrument (keeping only the latest timestamp). Every drop is
//! logged with its rule tag; the log serializes as JSON lines.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{CohortManifest, ManifestRow};

#[derive(Debug, Clone, Serialize)]
pub struct ExclusionEntry {
    pub rule: String,
    pub cohort: String,
    pub original_slide_id: String,
    pub filename: String,
    pub scan_timestamp: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExclusionLog {
    pub entries: Vec<ExclusionEntry>,
}

impl ExclusionLog {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("serializable entry"));
            out.push('\n');
        }
        out
    }
}

fn drop_row(log: &mut ExclusionLog, row: &ManifestRow, rule: &str, detail: String) {
    log.entries.push(ExclusionEntry {
        rule: rule.into(),
        cohort: row.cohort.clone(),
        original_slide_id: row.original_slide_id.clone(),
        filename: row.filename.clone(),
        scan_timestamp: row.scan_timestamp.clone(),
        detail,
    });
}

/// Apply the manifest-level exclusion rules, returning the surviving
/// manifest and a log with one entry per dropped row.
pub fn apply_exclusions(manifest: &CohortManifest) -> (CohortManifest, ExclusionLog) {
    let mut log = ExclusionLog::default();

    // Missing identifier fields.
    let mut rows: Vec<ManifestRow> = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        if super::validate::validate_manifest(&CohortManifest::new(vec![row.clone()]))
            .iter()
            .any(|v| v.rule == "missing-id")
        {
            drop_row(
                &mut log,
                row,
                "missing-id",
                "identifier fields incomplete".into(),
            );
        } else {
            rows.push(row.clone());
        }
    }

    // Ambiguous ids: duplicated wsi ids and slides claimed by two patients.
    let ids: Vec<(String, String, String)> = rows
        .iter()
        .map(|r| r.ids().expect("ids complete"))
        .collect();
    let mut wsi_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut slide_patients: BTreeMap<String, std::collections::BTreeSet<String>> = BTreeMap::new();
    for (patient_id, slide_id, wsi_id) in &ids {
        *wsi_counts.entry(wsi_id.clone()).or_default() += 1;
        slide_patients
            .entry(slide_id.clone())
            .or_default()
            .insert(patient_id.clone());
    }
    let mut kept = Vec::new();
    for (row, (_, slide_id, wsi_id)) in rows.into_iter().zip(ids) {
        if wsi_counts[wsi_id.as_str()] > 1 {
            drop_row(&mut log, &row, "ambiguous-id", "duplicate wsi_id".into());
        } else if slide_patients[slide_id.as_str()].len() > 1 {
            drop_row(
                &mut log,
                &row,
                "ambiguous-id",
                "slide maps to several patients".into(),
            );
        } else {
            kept.push(row);
        }
    }

    // Invalid values and label problems, by the same rules as validation.
    let mut survivors = Vec::new();
    for row in kept {
        let single = CohortManifest::new(vec![row.clone()]);
        let violations = super::validate::validate_manifest(&single);
        match violations.first() {
            None => survivors.push(row),
            Some(v) => {
                let rule = match v.rule.as_str() {
                    "partial-gs" => "partial-gs",
                    "gs-isup-mismatch" | "benign-with-score" => "gs-isup-mismatch",
                    _ => "invalid-value",
                };
                drop_row(&mut log, &row, rule, v.detail.clone());
            }
        }
    }

    // Stale rescans: keep only the latest timestamp per (slide, scanner
    // instrument). Timestamps are ISO-8601 and compare lexicographically.
    let mut latest: BTreeMap<(String, String), String> = BTreeMap::new();
    for row in &survivors {
        let (_, slide_id, _) = row.ids().expect("ids complete");
        let key = (slide_id, row.scanner_serial.clone());
        let entry = latest
            .entry(key)
            .or_insert_with(|| row.scan_timestamp.clone());
        if row.scan_timestamp > *entry {
            *entry = row.scan_timestamp.clone();
        }
    }
    let mut final_rows = Vec::new();
    for row in survivors {
        let (_, slide_id, _) = row.ids().expect("ids complete");
        let key = (slide_id, row.scanner_serial.clone());
        if row.scan_timestamp < latest[&key] {
            drop_row(
                &mut log,
                &row,
                "rescans",
                format!("superseded by scan at {}", latest[&key]),
            );
        } else {
            final_rows.push(row);
        }
    }

    (CohortManifest::new(final_rows), log)
}
