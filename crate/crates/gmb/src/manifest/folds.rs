//! Stratified cross-validation fold assignment.
//!
//! Development patients are stratified by (cohort, maximum labeled ISUP
//! grade across the patient's slides) and dealt round-robin into k folds
//! within each shuffled stratum, so per-stratum fold sizes differ by at
//! most one. Deterministic for a given seed.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{CohortManifest, ManifestError, Split};

/// Assign each development patient a fold in 0..k-1 and return the updated
/// manifest. Non-development rows are untouched.
pub fn make_cv_folds(
    manifest: &CohortManifest,
    k: u32,
    seed: u64,
) -> Result<CohortManifest, ManifestError> {
    if k < 2 {
        return Err(ManifestError::Folds(format!("k must be >= 2, got {k}")));
    }

    // Stratum key per development patient: (cohort, max ISUP).
    let mut patient_stratum: BTreeMap<String, (String, u8)> = BTreeMap::new();
    for row in &manifest.rows {
        if row.split != Split::Development.as_str() {
            continue;
        }
        let (patient_id, _, _) = row.ids()?;
        let label = row
            .reference()
            .map_err(|e| ManifestError::Folds(format!("unusable label: {e}")))?;
        let entry = patient_stratum
            .entry(patient_id)
            .or_insert_with(|| (row.cohort.clone(), 0));
        if let Some(label) = label {
            entry.1 = entry.1.max(label.isup.grade());
        }
    }
    // Patients without any labeled slide cannot be stratified.
    for row in &manifest.rows {
        if row.split != Split::Development.as_str() {
            continue;
        }
        let (patient_id, _, _) = row.ids()?;
        let labeled = manifest.rows.iter().any(|r| {
            r.split == Split::Development.as_str()
                && r.ids().map(|(p, _, _)| p == patient_id).unwrap_or(false)
                && !r.label_level.is_empty()
        });
        if !labeled {
            return Err(ManifestError::Folds(format!(
                "development patient {patient_id} has no labeled slide"
            )));
        }
    }

    let n_patients = patient_stratum.len() as u32;
    if k > n_patients {
        return Err(ManifestError::Folds(format!(
            "k = {k} exceeds the {n_patients} development patients"
        )));
    }

    // Group into strata, shuffle each, deal round-robin.
    let mut strata: BTreeMap<(String, u8), Vec<String>> = BTreeMap::new();
    for (patient_id, key) in &patient_stratum {
        strata
            .entry(key.clone())
            .or_default()
            .push(patient_id.clone());
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut assignment: BTreeMap<String, u32> = BTreeMap::new();
    for (_, mut patients) in strata {
        patients.sort();
        patients.shuffle(&mut rng);
        for (i, patient_id) in patients.into_iter().enumerate() {
            assignment.insert(patient_id, i as u32 % k);
        }
    }

    let mut out = manifest.clone();
    for row in &mut out.rows {
        if row.split == Split::Development.as_str() {
            let (patient_id, _, _) = row.ids()?;
            row.cv_fold = assignment[&patient_id].to_string();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::ManifestRow;

    fn dev_row(patient: &str, isup: u8, cohort: &str) -> ManifestRow {
        let (gp, gsec) = match isup {
            0 => ("", ""),
            1 => ("3", "3"),
            2 => ("3", "4"),
            3 => ("4", "3"),
            4 => ("4", "4"),
            _ => ("4", "5"),
        };
        ManifestRow {
            cohort: cohort.into(),
            original_patient_id: patient.into(),
            original_slide_id: format!("s-{patient}"),
            filename: format!("f-{patient}.png"),
            scanner_vendor: "SynthScan".into(),
            scanner_model: "S1".into(),
            scanner_serial: "SN1".into(),
            scan_timestamp: "2024-01-01T00:00:00".into(),
            pixel_size_um: "1.0".into(),
            label_level: "slide".into(),
            gleason_primary: gp.into(),
            gleason_secondary: gsec.into(),
            isup: isup.to_string(),
            group_key: String::new(),
            split: "development".into(),
            cv_fold: String::new(),
        }
    }

    fn fold_sizes(m: &CohortManifest, k: u32) -> Vec<usize> {
        let mut sizes = vec![0usize; k as usize];
        for row in &m.rows {
            sizes[row.cv_fold.parse::<usize>().unwrap()] += 1;
        }
        sizes
    }

    #[test]
    fn one_stratum_divides_evenly() {
        let rows: Vec<ManifestRow> = (0..100)
            .map(|i| dev_row(&format!("p{i}"), 2, "C"))
            .collect();
        let folded = make_cv_folds(&CohortManifest::new(rows), 10, 1).unwrap();
        assert_eq!(fold_sizes(&folded, 10), vec![10; 10]);
    }

    #[test]
    fn remainders_differ_by_at_most_one() {
        let rows: Vec<ManifestRow> = (0..23).map(|i| dev_row(&format!("p{i}"), 3, "C")).collect();
        let folded = make_cv_folds(&CohortManifest::new(rows), 10, 1).unwrap();
        let sizes = fold_sizes(&folded, 10);
        assert!(sizes.iter().all(|&s| s == 2 || s == 3), "{sizes:?}");
        assert_eq!(sizes.iter().sum::<usize>(), 23);
    }

    #[test]
    fn deterministic_per_seed() {
        let rows: Vec<ManifestRow> = (0..40)
            .map(|i| dev_row(&format!("p{i}"), (i % 6) as u8, "C"))
            .collect();
        let m = CohortManifest::new(rows);
        let a = make_cv_folds(&m, 5, 42).unwrap();
        let b = make_cv_folds(&m, 5, 42).unwrap();
        assert_eq!(a, b);
        let c = make_cv_folds(&m, 5, 43).unwrap();
        assert_ne!(a, c, "a different seed should shuffle differently");
    }

    #[test]
    fn every_development_patient_lands_in_exactly_one_fold() {
        let mut rows: Vec<ManifestRow> = (0..30)
            .map(|i| {
                dev_row(
                    &format!("p{i}"),
                    (i % 6) as u8,
                    if i % 2 == 0 { "A" } else { "B" },
                )
            })
            .collect();
        // Two slides for one patient must share the fold.
        let mut extra = dev_row("p0", 0, "A");
        extra.original_slide_id = "s-p0-b".into();
        extra.filename = "f-p0-b.png".into();
        rows.push(extra);
        let folded = make_cv_folds(&CohortManifest::new(rows), 3, 9).unwrap();
        let mut per_patient: std::collections::BTreeMap<
            String,
            std::collections::BTreeSet<String>,
        > = Default::default();
        for row in &folded.rows {
            let (pid, _, _) = row.ids().unwrap();
            per_patient
                .entry(pid)
                .or_default()
                .insert(row.cv_fold.clone());
        }
        assert_eq!(per_patient.len(), 30);
        assert!(per_patient.values().all(|folds| folds.len() == 1));
    }

    #[test]
    fn stratification_balances_within_strata() {
        // 12 patients of grade 0 and 12 of grade 5 in one cohort: each
        // stratum splits 4/4/4 across k=3.
        let mut rows = Vec::new();
        for i in 0..12 {
            rows.push(dev_row(&format!("a{i}"), 0, "C"));
            rows.push(dev_row(&format!("b{i}"), 5, "C"));
        }
        let folded = make_cv_folds(&CohortManifest::new(rows), 3, 7).unwrap();
        for grade in ["0", "5"] {
            let mut sizes = vec![0usize; 3];
            for row in folded.rows.iter().filter(|r| r.isup == grade) {
                sizes[row.cv_fold.parse::<usize>().unwrap()] += 1;
            }
            assert_eq!(sizes, vec![4, 4, 4], "grade {grade}");
        }
    }

    #[test]
    fn error_cases() {
        let rows: Vec<ManifestRow> = (0..3).map(|i| dev_row(&format!("p{i}"), 2, "C")).collect();
        let m = CohortManifest::new(rows);
        assert!(make_cv_folds(&m, 1, 0).is_err());
        assert!(make_cv_folds(&m, 4, 0).is_err());

        let mut unlabeled = dev_row("px", 2, "C");
        unlabeled.label_level = String::new();
        unlabeled.gleason_primary = String::new();
        unlabeled.gleason_secondary = String::new();
        unlabeled.isup = String::new();
        let m = CohortManifest::new(vec![unlabeled, dev_row("p1", 2, "C")]);
        assert!(make_cv_folds(&m, 2, 0).is_err());
    }
}
