//! Confounder-decorrelating epoch sampler.
//!
//! Grade distributions differ between scanners, which lets a model link
//! scanner appearance to diagnosis. At the start of each epoch, slides are
//! resampled with replacement so that within every scanner each ISUP grade
//! reaches the scanner's largest class count: the per-scanner grade
//! distributions become exactly uniform (and therefore identical across
//! scanners). Slides rescanned on several instruments contribute one WSI
//! picked uniformly at random per epoch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::manifest::{LabelLevel, ManifestIndex, Split};

/// One epoch's training order: (slide_id, chosen wsi_id) pairs.
pub fn epoch_sample(index: &ManifestIndex, seed: u64) -> Vec<(String, String)> {
    epoch_sample_excluding(index, None, seed)
}

/// As [`epoch_sample`], restricted to development patients outside the
/// held-out fold (when given).
pub fn epoch_sample_excluding(
    index: &ManifestIndex,
    exclude_fold: Option<u32>,
    seed: u64,
) -> Vec<(String, String)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Slide-level labeled development slides, in deterministic order.
    let mut eligible: Vec<(&String, u8)> = Vec::new();
    for patient in index.patients.values() {
        if patient.split != Split::Development {
            continue;
        }
        if let (Some(fold), Some(excluded)) = (patient.cv_fold, exclude_fold) {
            if fold == excluded {
                continue;
            }
        }
        for slide_id in &patient.slide_ids {
            let slide = &index.slides[slide_id];
            if let Some(label) = &slide.reference {
                if label.level == LabelLevel::Slide {
                    eligible.push((slide_id, label.isup.grade()));
                }
            }
        }
    }
    eligible.sort_by(|a, b| a.0.cmp(b.0));

    // Scanner augmentation: one WSI per slide, uniformly at random.
    type SlideWsi = (String, String);
    let mut by_scanner: BTreeMap<&str, BTreeMap<u8, Vec<SlideWsi>>> = BTreeMap::new();
    for (slide_id, grade) in eligible {
        let slide = &index.slides[slide_id];
        let mut wsi_ids = slide.wsi_ids.clone();
        wsi_ids.sort();
        let wsi_id = wsi_ids[rng.random_range(0..wsi_ids.len())].clone();
        let serial = index.wsis[&wsi_id].scanner_serial.as_str();
        by_scanner
            .entry(serial)
            .or_default()
            .entry(grade)
            .or_default()
            .push((slide_id.clone(), wsi_id));
    }

    // Oversample with replacement up to the scanner's largest class.
    let mut epoch = Vec::new();
    for (_, classes) in by_scanner {
        let target = classes.values().map(Vec::len).max().unwrap_or(0);
        for (_, members) in classes {
            epoch.extend(members.iter().cloned());
            for _ in members.len()..target {
                epoch.push(members[rng.random_range(0..members.len())].clone());
            }
        }
    }
    epoch.shuffle(&mut rng);
    epoch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{CohortManifest, ManifestRow};

    fn row(patient: &str, slide: &str, file: &str, serial: &str, isup: u8) -> ManifestRow {
        let (gp, gs) = match isup {
            0 => ("", ""),
            1 => ("3", "3"),
            2 => ("3", "4"),
            3 => ("4", "3"),
            4 => ("4", "4"),
            _ => ("4", "5"),
        };
        ManifestRow {
            cohort: "C".into(),
            original_patient_id: patient.into(),
            original_slide_id: slide.into(),
            filename: file.into(),
            scanner_vendor: "SynthScan".into(),
            scanner_model: "S1".into(),
            scanner_serial: serial.into(),
            scan_timestamp: format!("2024-01-01T00:00:00-{file}"),
            pixel_size_um: "1.0".into(),
            label_level: "slide".into(),
            gleason_primary: gp.into(),
            gleason_secondary: gs.into(),
            isup: isup.to_string(),
            group_key: String::new(),
            split: "development".into(),
            cv_fold: "0".into(),
        }
    }

    fn histogram(
        epoch: &[(String, String)],
        index: &ManifestIndex,
    ) -> BTreeMap<(String, u8), usize> {
        let mut h = BTreeMap::new();
        for (slide_id, wsi_id) in epoch {
            let serial = index.wsis[wsi_id].scanner_serial.clone();
            let grade = index.slides[slide_id]
                .reference
                .as_ref()
                .unwrap()
                .isup
                .grade();
            *h.entry((serial, grade)).or_default() += 1;
        }
        h
    }

    #[test]
    fn oversampling_reaches_the_largest_class() {
        // Scanner with 10 benign and 2 grade-1 slides -> 20 samples, 10 each.
        let mut rows = Vec::new();
        for i in 0..10 {
            rows.push(row(
                &format!("p{i}"),
                &format!("s{i}"),
                &format!("f{i}.png"),
                "SN1",
                0,
            ));
        }
        for i in 10..12 {
            rows.push(row(
                &format!("p{i}"),
                &format!("s{i}"),
                &format!("f{i}.png"),
                "SN1",
                1,
            ));
        }
        let index = CohortManifest::new(rows).index().unwrap();
        let epoch = epoch_sample(&index, 5);
        assert_eq!(epoch.len(), 20);
        let h = histogram(&epoch, &index);
        assert_eq!(h[&("SN1".to_string(), 0)], 10);
        assert_eq!(h[&("SN1".to_string(), 1)], 10);
    }

    #[test]
    fn already_uniform_scanner_is_left_alone() {
        let mut rows = Vec::new();
        for i in 0..6 {
            rows.push(row(
                &format!("p{i}"),
                &format!("s{i}"),
                &format!("f{i}.png"),
                "SN1",
                (i % 3) as u8,
            ));
        }
        let index = CohortManifest::new(rows).index().unwrap();
        let epoch = epoch_sample(&index, 1);
        assert_eq!(epoch.len(), 6);
        let mut slides: Vec<&str> = epoch.iter().map(|(s, _)| s.as_str()).collect();
        slides.sort();
        slides.dedup();
        assert_eq!(slides.len(), 6, "no duplicates needed when already uniform");
    }

    #[test]
    fn per_scanner_histograms_are_exactly_uniform() {
        use rand::Rng as _;
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        for trial in 0..20u64 {
            let mut rows = Vec::new();
            let mut k = 0;
            for scanner in 0..3 {
                for grade in 0..6u8 {
                    let count = rng.random_range(1..6);
                    for _ in 0..count {
                        rows.push(row(
                            &format!("p{k}"),
                            &format!("s{k}"),
                            &format!("f{k}.png"),
                            &format!("SN{scanner}"),
                            grade,
                        ));
                        k += 1;
                    }
                }
            }
            let index = CohortManifest::new(rows).index().unwrap();
            let epoch = epoch_sample(&index, trial);
            let h = histogram(&epoch, &index);
            for scanner in 0..3 {
                let serial = format!("SN{scanner}");
                let counts: Vec<usize> = (0..6u8)
                    .map(|g| h.get(&(serial.clone(), g)).copied().unwrap_or(0))
                    .collect();
                assert!(
                    counts.windows(2).all(|w| w[0] == w[1]),
                    "trial {trial} scanner {serial}: {counts:?}"
                );
            }
        }
    }

    #[test]
    fn rescanned_slides_pick_each_instrument_roughly_uniformly() {
        let mut rows = vec![
            row("p0", "s0", "f0.png", "SN0", 2),
            row("p0", "s0", "f1.png", "SN1", 2),
            row("p0", "s0", "f2.png", "SN2", 2),
        ];
        // One extra slide per scanner so each scanner exists regardless of
        // the pick.
        rows.push(row("p1", "s1", "g0.png", "SN0", 2));
        rows.push(row("p2", "s2", "g1.png", "SN1", 2));
        rows.push(row("p3", "s3", "g2.png", "SN2", 2));
        let index = CohortManifest::new(rows).index().unwrap();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let (target_slide, _, _) = row("p0", "s0", "f0.png", "SN0", 2).ids().unwrap();
        let _ = target_slide;
        for epoch_seed in 0..3000u64 {
            let epoch = epoch_sample(&index, epoch_seed);
            // Find which instrument digitized slide s0 this epoch.
            for (slide_id, wsi_id) in &epoch {
                if index.slides[slide_id].original_slide_id == "s0" {
                    *counts
                        .entry(index.wsis[wsi_id].scanner_serial.clone())
                        .or_default() += 1;
                    break;
                }
            }
        }
        // Binomial(3000, 1/3) stays within 1000 +- 100 except with
        // negligible probability.
        for (serial, count) in counts {
            assert!(
                (count as i64 - 1000).abs() <= 100,
                "{serial} picked {count} times"
            );
        }
    }

    #[test]
    fn deterministic_per_seed_and_order_shuffled() {
        let rows: Vec<ManifestRow> = (0..12)
            .map(|i| {
                row(
                    &format!("p{i}"),
                    &format!("s{i}"),
                    &format!("f{i}.png"),
                    "SN1",
                    (i % 2) as u8,
                )
            })
            .collect();
        let index = CohortManifest::new(rows).index().unwrap();
        let a = epoch_sample(&index, 9);
        let b = epoch_sample(&index, 9);
        assert_eq!(a, b);
        let c = epoch_sample(&index, 10);
        assert_ne!(a, c, "different seeds give different orders");
    }
}
