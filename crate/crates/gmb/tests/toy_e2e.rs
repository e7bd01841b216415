//! End-to-end training of the trainable toy encoder on raw patches, and
//! the patch-level bypass quality it reaches on held-out slides.

use std::collections::BTreeMap;
use std::path::Path;

use gmb::cli::{cmd_synth, cmd_tile, cmd_train, PathsConfig, RunConfig};
use gmb::infer::heatmap;
use gmb::model::EncoderMode;
use gmb::tile::read_patch_records;
use gmb::train::{EnsembleCheckpoint, TrainConfig};

fn toy_config(root: &Path) -> RunConfig {
    RunConfig {
        seed: 5,
        paths: PathsConfig::under(root),
        tile: Default::default(),
        train: gmb::cli::TrainSection {
            optimizer: TrainConfig {
                // Desk-scale end-to-end: the encoder trains from scratch,
                // which needs a larger step size than the frozen head.
                lr: 3e-3,
                patience_epochs: 20,
                max_epochs: 20,
                seed: 5,
                ..TrainConfig::default()
            },
            encoder_mode: EncoderMode::TrainableToy,
            embed_dim: 32,
            cv_folds: 2,
            ..Default::default()
        },
        inference: Default::default(),
        synth: Some(gmb::synth::SynthConfig {
            n_patients: 48,
            n_validation_patients: 16,
            n_scanners: 2,
            grid: (3, 2),
            // Benign-heavy mixture so the held-out benign patch count is
            // large enough for a stable accuracy estimate.
            grade_mixture: vec![
                3.0,
                1.0,
                1.0,
                1.0,
                1.0 / 3.0,
                1.0 / 3.0,
                1.0 / 3.0,
                1.0 / 3.0,
                1.0 / 3.0,
                1.0 / 3.0,
            ],
            cv_folds: 2,
            seed: 5,
            ..gmb::synth::SynthConfig::default()
        }),
        energy: None,
    }
}

#[test]
fn toy_training_classifies_held_out_patches() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = toy_config(root);
    assert_eq!(cmd_synth(&config).unwrap(), 0);
    assert_eq!(cmd_tile(&config).unwrap(), 0);
    assert_eq!(cmd_train(&config).unwrap(), 0);

    let ensemble = EnsembleCheckpoint::load(&config.paths.checkpoint_dir).unwrap();
    let model = &ensemble.folds[0].params;

    // Patch-level bypass on every held-out WSI, scored against the
    // generator's per-patch truth.
    let manifest = gmb::manifest::CohortManifest::load(&config.paths.manifest).unwrap();
    let mut total = 0usize;
    let mut correct = 0usize;
    let mut benign_total = 0usize;
    let mut benign_correct = 0usize;
    for row in &manifest.rows {
        if row.split != "internal_validation" {
            continue;
        }
        let (_, _, wsi_id) = row.ids().unwrap();
        let records =
            read_patch_records(&config.paths.patch_dir.join(format!("{wsi_id}.gpr"))).unwrap();
        let truth: BTreeMap<String, serde_json::Value> = serde_json::from_str::<serde_json::Value>(
            &std::fs::read_to_string(config.paths.truth_dir.join(format!("{wsi_id}.json")))
                .unwrap(),
        )
        .unwrap()["classes"]
            .as_object()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let rows = heatmap(model, &records, None).unwrap();
        assert_eq!(rows.len(), records.len(), "one heatmap row per patch");
        for r in &rows {
            let class = truth[&format!("{},{}", r.x, r.y)].as_u64().unwrap() as usize;
            let probs = [r.p_benign, r.p3, r.p4, r.p5];
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            total += 1;
            correct += (pred == class) as usize;
            if class == 0 {
                benign_total += 1;
                benign_correct += (pred == 0) as usize;
            }
        }
    }
    assert!(
        total >= 60,
        "expected a meaningful held-out patch count, got {total}"
    );
    assert!(
        benign_total >= 18,
        "expected enough benign patches, got {benign_total}"
    );
    let accuracy = correct as f64 / total as f64;
    let benign_accuracy = benign_correct as f64 / benign_total as f64;
    println!("toy e2e: patch accuracy {accuracy:.3} ({correct}/{total}), benign {benign_accuracy:.3} ({benign_correct}/{benign_total})");
    assert!(accuracy >= 0.90, "patch accuracy {accuracy:.3} below 0.90");
    assert!(
        benign_accuracy >= 0.95,
        "benign accuracy {benign_accuracy:.3} below 0.95"
    );
}
