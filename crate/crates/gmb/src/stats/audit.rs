//! Clinically significant error audit.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::grading::{is_significant_error, IsupGrade};

#[derive(Debug, Clone, Serialize)]
pub struct AuditRow {
    pub slide_id: String,
    pub reference_isup: u8,
    pub predicted_isup: u8,
    pub rule: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditTable {
    pub rows: Vec<AuditRow>,
    pub evaluated: usize,
    /// Errors as a fraction of evaluated slides.
    pub rate: f64,
}

impl AuditTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slide_id,reference_isup,predicted_isup,rule\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.slide_id, row.reference_isup, row.predicted_isup, row.rule
            ));
        }
        out
    }
}

/// List every slide whose prediction is a clinically significant error and
/// the overall error rate.
pub fn significant_error_audit(cases: &[(String, IsupGrade, IsupGrade)]) -> AuditTable {
    let mut rows = Vec::new();
    for (slide_id, reference, predicted) in cases {
        if is_significant_error(*reference, *predicted) {
            let rule = if predicted.is_benign() {
                "cancer-predicted-benign"
            } else {
                "benign-predicted-cancer"
            };
            rows.push(AuditRow {
                slide_id: slide_id.clone(),
                reference_isup: reference.grade(),
                predicted_isup: predicted.grade(),
                rule: rule.into(),
            });
        }
    }
    let rate = if cases.is_empty() {
        0.0
    } else {
        rows.len() as f64 / cases.len() as f64
    };
    AuditTable {
        rows,
        evaluated: cases.len(),
        rate,
    }
}

/// Slides flagged by every one of several models' audits.
pub fn audit_intersection(tables: &[AuditTable]) -> Vec<String> {
    let mut iter = tables.iter();
    let Some(first) = iter.next() else {
        return Vec::new();
    };
    let mut common: BTreeSet<String> = first.rows.iter().map(|r| r.slide_id.clone()).collect();
    for table in iter {
        let ids: BTreeSet<String> = table.rows.iter().map(|r| r.slide_id.clone()).collect();
        common = common.intersection(&ids).cloned().collect();
    }
    common.into_iter().collect()
}
