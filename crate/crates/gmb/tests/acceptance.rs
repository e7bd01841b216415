//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line. Closed-form numbers are checked exactly; statistical behavior is
//! checked on synthetic cohorts. Run with `cargo test --test acceptance`
//! (add `-- --nocapture` to see the lines for passing criteria).

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use gmb::cli::{cmd_evaluate, cmd_predict, cmd_synth, cmd_tile, cmd_train, PathsConfig, RunConfig};
use gmb::grading::{
    decode_gs_ordinal, encode_gs_ordinal, gs_to_isup, GleasonScore, GsOrdinal, IsupGrade,
};
use gmb::model::{
    forward_patch, forward_slide, init_params, relu_pattern, Bag, DropoutMode, EncoderSpec, Matrix,
    MilParams,
};
use gmb::stats::{
    auroc, bootstrap_ci, cohen_kappa, cross_scanner, sens_spec, significant_error_audit,
    KappaWeighting, PairedRatings,
};
use gmb::train::{backward, bag_loss, epoch_sample, TrainConfig};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

struct Criterion {
    number: u32,
    title: &'static str,
    passed: std::cell::Cell<bool>,
}

impl Criterion {
    fn new(number: u32, title: &'static str) -> Self {
        Criterion {
            number,
            title,
            passed: std::cell::Cell::new(true),
        }
    }

    fn check(&self, ok: bool, detail: &str) {
        if !ok {
            self.passed.set(false);
            println!(
                "criterion {:02} ({}): FAIL - {detail}",
                self.number, self.title
            );
            panic!("criterion {:02} failed: {detail}", self.number);
        }
    }
}

impl Drop for Criterion {
    fn drop(&mut self) {
        if self.passed.get() && !std::thread::panicking() {
            println!("criterion {:02} ({}): PASS", self.number, self.title);
        }
    }
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_encoding_fidelity() {
    let c = Criterion::new(1, "encoding fidelity");
    let table: [(&str, u8, u8); 10] = [
        ("benign", 0, 0),
        ("3+3", 1, 1),
        ("3+4", 2, 2),
        ("4+3", 3, 3),
        ("3+5", 4, 4),
        ("4+4", 5, 4),
        ("5+3", 6, 4),
        ("4+5", 7, 5),
        ("5+4", 8, 5),
        ("5+5", 9, 5),
    ];
    for (text, ordinal, isup) in table {
        let score: GleasonScore = text.parse().unwrap();
        c.check(
            encode_gs_ordinal(score).value() == ordinal,
            &format!("{text} must encode to ordinal {ordinal}"),
        );
        c.check(
            gs_to_isup(score).grade() == isup,
            &format!("{text} must map to ISUP {isup}"),
        );
        let round = decode_gs_ordinal(GsOrdinal::new(ordinal).unwrap());
        c.check(
            round == score,
            &format!("ordinal {ordinal} must decode to {text}"),
        );
    }
    // The encoding is bijective over exactly the ten valid scores.
    let all: BTreeSet<u8> = GleasonScore::all()
        .iter()
        .map(|&s| encode_gs_ordinal(s).value())
        .collect();
    c.check(all.len() == 10, "ordinal encoding must be bijective");
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_energy_arithmetic() {
    let c = Criterion::new(2, "energy arithmetic");
    let cases = [(0.51, 0.63), (5.40, 6.74), (17.70, 22.09)];
    for (kwh, wh) in cases {
        let got = gmb::energy::per_biopsy(kwh, 801).unwrap();
        c.check(
            (got - wh).abs() <= 0.01,
            &format!("{kwh} kWh over 801 slides: {got:.4} Wh vs {wh}"),
        );
    }
    let ufm_ratio: f64 = 5.40 / 0.51;
    let vfm_ratio: f64 = 17.70 / 0.51;
    c.check(
        (ufm_ratio - 10.6).abs() <= 0.1,
        &format!("UFM/TS ratio {ufm_ratio:.3} vs 10.6"),
    );
    c.check(
        (vfm_ratio - 34.7).abs() <= 0.1,
        &format!("VFM/TS ratio {vfm_ratio:.3} vs 34.7"),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_significant_error_rate() {
    let c = Criterion::new(3, "significant error rate arithmetic");
    let total = 11_406usize;
    let flagged = 110usize;
    let isup = |g: u8| IsupGrade::new(g).unwrap();
    let mut cases = Vec::with_capacity(total);
    for i in 0..total {
        if i < flagged {
            cases.push((format!("s{i}"), isup(3), isup(0)));
        } else {
            cases.push((format!("s{i}"), isup(1), isup(1)));
        }
    }
    let table = significant_error_audit(&cases);
    c.check(
        table.rows.len() == flagged,
        "audit must flag exactly the planted errors",
    );
    let rate_percent = table.rate * 100.0;
    c.check(
        (rate_percent - 0.96).abs() <= 0.01,
        &format!("rate {rate_percent:.4}% vs 0.96%"),
    );
}

// ---------------------------------------------------------------- 4

mod oracles {
    //! Brute-force reference implementations, kept independent of the
    //! library's formulations.

    pub fn kappa(reference: &[usize], predicted: &[usize], c: usize, power: u32) -> Option<f64> {
        // Agreement form: kappa = (po - pe) / (1 - pe) with weighted
        // agreement 1 - w_ij; power 0 encodes the unweighted 0/1 case.
        let n = reference.len() as f64;
        let w = |i: usize, j: usize| -> f64 {
            if i == j {
                0.0
            } else if power == 0 {
                1.0
            } else {
                let d = (i as f64 - j as f64).abs() / (c as f64 - 1.0);
                d.powi(power as i32)
            }
        };
        let mut po = 0.0;
        for (&r, &p) in reference.iter().zip(predicted) {
            po += 1.0 - w(r, p);
        }
        po /= n;
        let mut pe = 0.0;
        for i in 0..c {
            let ri = reference.iter().filter(|&&v| v == i).count() as f64 / n;
            for j in 0..c {
                let pj = predicted.iter().filter(|&&v| v == j).count() as f64 / n;
                pe += ri * pj * (1.0 - w(i, j));
            }
        }
        if (1.0 - pe).abs() < 1e-15 {
            None
        } else {
            Some((po - pe) / (1.0 - pe))
        }
    }

    pub fn sens_spec(reference: &[bool], predicted: &[bool]) -> (Option<f64>, Option<f64>) {
        let mut tp = 0.0;
        let mut p = 0.0;
        let mut tn = 0.0;
        let mut n = 0.0;
        for (&r, &pr) in reference.iter().zip(predicted) {
            if r {
                p += 1.0;
                if pr {
                    tp += 1.0;
                }
            } else {
                n += 1.0;
                if !pr {
                    tn += 1.0;
                }
            }
        }
        (
            if p > 0.0 { Some(tp / p) } else { None },
            if n > 0.0 { Some(tn / n) } else { None },
        )
    }

    pub fn auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut concordant = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    concordant += 1.0;
                } else if scores[i] == scores[j] {
                    concordant += 0.5;
                }
            }
        }
        concordant / pairs
    }
}

#[test]
fn criterion_04_metric_oracles() {
    let c = Criterion::new(4, "metric oracles");
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(0x040404);
    for instance in 0..1000 {
        let n = rng.random_range(2..=200usize);
        let categories = rng.random_range(2..=10usize);
        let reference: Vec<usize> = (0..n).map(|_| rng.random_range(0..categories)).collect();
        let predicted: Vec<usize> = reference
            .iter()
            .map(|&r| {
                if rng.random::<f64>() < 0.6 {
                    r
                } else {
                    rng.random_range(0..categories)
                }
            })
            .collect();
        let ratings = PairedRatings::new(reference.clone(), predicted.clone(), categories).unwrap();
        for (weighting, power) in [
            (KappaWeighting::None, 0u32),
            (KappaWeighting::Linear, 1),
            (KappaWeighting::Quadratic, 2),
        ] {
            let got = cohen_kappa(&ratings, weighting).ok();
            let want = oracles::kappa(&reference, &predicted, categories, power);
            match (got, want) {
                (None, None) => {}
                (Some(g), Some(w)) => c.check(
                    (g - w).abs() <= 1e-12,
                    &format!("instance {instance}: kappa {g} vs oracle {w}"),
                ),
                _ => c.check(false, &format!("instance {instance}: definedness mismatch")),
            }
        }

        let ref_bin: Vec<bool> = reference.iter().map(|&r| r >= categories / 2).collect();
        let pred_bin: Vec<bool> = predicted.iter().map(|&p| p >= categories / 2).collect();
        let got = sens_spec(&ref_bin, &pred_bin).unwrap();
        let want = oracles::sens_spec(&ref_bin, &pred_bin);
        for (g, w) in [(got.sensitivity, want.0), (got.specificity, want.1)] {
            match (g, w) {
                (None, None) => {}
                (Some(g), Some(w)) => {
                    c.check((g - w).abs() <= 1e-12, &format!("sens/spec {g} vs {w}"))
                }
                _ => c.check(false, "sens/spec definedness mismatch"),
            }
        }

        let scores: Vec<f64> = (0..n)
            .map(|i| {
                // Correlated scores with deliberate ties.
                let base: f64 = if ref_bin[i] { 0.6 } else { 0.4 };
                (base + rng.random_range(-0.5..0.5) * 0.8 * 10.0).round() / 10.0
            })
            .collect();
        if ref_bin.iter().any(|&b| b) && ref_bin.iter().any(|&b| !b) {
            let got = auroc(&scores, &ref_bin).unwrap();
            let want = oracles::auroc(&scores, &ref_bin);
            c.check(
                (got - want).abs() <= 1e-12,
                &format!("instance {instance}: auroc {got} vs oracle {want}"),
            );
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    c.check(
        elapsed < 10.0,
        &format!("runtime {elapsed:.2}s exceeds 10s"),
    );
}

// ---------------------------------------------------------------- 5

fn random_bag_f64(rng: &mut ChaCha12Rng, spec: &EncoderSpec, n: usize) -> Bag<f64> {
    match spec.mode {
        gmb::model::EncoderMode::FrozenFile => {
            let data: Vec<f64> = (0..n * spec.embed_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            Bag::Embeddings(Matrix::from_vec(n, spec.embed_dim, data))
        }
        gmb::model::EncoderMode::TrainableToy => {
            let patches = (0..n)
                .map(|_| {
                    let mut fm = gmb::model::FeatureMap::zeros(3, 7, 7);
                    for v in fm.data.iter_mut() {
                        *v = rng.random_range(0.0..1.0);
                    }
                    fm
                })
                .collect();
            Bag::Patches(patches)
        }
    }
}

#[test]
fn criterion_05_gradient_correctness() {
    let c = Criterion::new(5, "gradient correctness");
    let start = Instant::now();
    let h = 1e-3;
    let labels = ["benign", "3+3", "3+4", "4+3", "4+4", "5+5"];
    let mut checked_total = 0usize;
    for seed in 0..20u64 {
        for spec in [EncoderSpec::frozen(6), EncoderSpec::toy(6)] {
            let mut rng = ChaCha12Rng::seed_from_u64(0x0505 + seed);
            let params: MilParams<f64> = init_params(&spec, 100 + seed);
            let label: GleasonScore = labels[(seed as usize) % labels.len()].parse().unwrap();

            // A finite difference estimates the derivative only where the
            // loss is smooth across the probe window. Occasionally a ReLU
            // pre-activation sits so close to zero that every probe of a
            // broadly-connected tensor crosses its kink; the probe point
            // (the bag) is then redrawn.
            let mut pending: Vec<&'static str> = params.tensor_names();
            for _bag_attempt in 0..4 {
                if pending.is_empty() {
                    break;
                }
                let bag = random_bag_f64(&mut rng, &spec, 3);
                let (_, grads) = backward(&params, &bag, label, DropoutMode::Off, 1).unwrap();
                let base_pattern = relu_pattern(&params, &bag, DropoutMode::Off).unwrap();
                let mut still_pending = Vec::new();
                for name in pending {
                    let len = params.tensor(name).len();
                    let mut confirmed = 0usize;
                    for _ in 0..8 {
                        if confirmed >= 2 {
                            break;
                        }
                        let idx = rng.random_range(0..len);
                        let mut plus = params.clone();
                        plus.tensor_mut(name)[idx] += h;
                        let mut minus = params.clone();
                        minus.tensor_mut(name)[idx] -= h;
                        let stable = relu_pattern(&plus, &bag, DropoutMode::Off).unwrap()
                            == base_pattern
                            && relu_pattern(&minus, &bag, DropoutMode::Off).unwrap()
                                == base_pattern;
                        if !stable {
                            continue;
                        }
                        let lp = bag_loss(&plus, &bag, label, DropoutMode::Off, 1).unwrap();
                        let lm = bag_loss(&minus, &bag, label, DropoutMode::Off, 1).unwrap();
                        let fd = (lp - lm) / (2.0 * h);
                        let analytic = grads.get(name).unwrap()[idx];
                        let denom = analytic.abs().max(fd.abs()).max(1e-4);
                        c.check(
                            (analytic - fd).abs() / denom <= 1e-4,
                            &format!("seed {seed} {name}[{idx}]: analytic {analytic} vs fd {fd}"),
                        );
                        confirmed += 1;
                        checked_total += 1;
                    }
                    if confirmed == 0 {
                        still_pending.push(name);
                    }
                }
                pending = still_pending;
            }
            c.check(
                pending.is_empty(),
                &format!("seed {seed}: no smooth probe window for {pending:?}"),
            );
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    c.check(
        checked_total >= 20 * 2 * 16,
        &format!("only {checked_total} confirmed probes"),
    );
    c.check(
        elapsed < 60.0,
        &format!("runtime {elapsed:.2}s exceeds 60s"),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_mil_invariants() {
    let c = Criterion::new(6, "MIL invariants");
    let mut rng = ChaCha12Rng::seed_from_u64(0x0606);
    for trial in 0..500 {
        let dim = *[8usize, 12, 16].choose(&mut rng).unwrap();
        let params = init_params::<f32>(&EncoderSpec::frozen(dim), trial);
        let n = rng.random_range(1..=60usize);
        let data: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let bag = Bag::Embeddings(Matrix::from_vec(n, dim, data.clone()));
        let fwd = forward_slide(&params, &bag, DropoutMode::Off).unwrap();

        // Attention simplex.
        c.check(
            fwd.attention.iter().all(|&a| a >= 0.0),
            "negative attention weight",
        );
        let sum: f64 = fwd.attention.iter().map(|&a| a as f64).sum();
        c.check((sum - 1.0).abs() <= 1e-6, &format!("attention sum {sum}"));

        // Permutation invariance.
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut shuffled = Vec::with_capacity(n * dim);
        for &i in &order {
            shuffled.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        }
        let permuted = forward_slide(
            &params,
            &Bag::Embeddings(Matrix::from_vec(n, dim, shuffled)),
            DropoutMode::Off,
        )
        .unwrap();
        for (a, b) in fwd.slide_vec.iter().zip(&permuted.slide_vec) {
            c.check(
                (a - b).abs() <= 1e-6,
                &format!("slide_vec drift {}", (a - b).abs()),
            );
        }
        for (a, b) in fwd.logits_primary.iter().chain(&fwd.logits_secondary).zip(
            permuted
                .logits_primary
                .iter()
                .chain(&permuted.logits_secondary),
        ) {
            c.check((a - b).abs() <= 1e-6, "logit drift under permutation");
        }
        c.check(
            gmb::model::predict_patterns(&fwd) == gmb::model::predict_patterns(&permuted),
            "prediction changed under permutation",
        );

        // Patch bypass is exactly the singleton slide pass.
        let one = Bag::Embeddings(Matrix::from_vec(1, dim, data[0..dim].to_vec()));
        let via_patch = forward_patch(&params, &one).unwrap();
        let via_slide = forward_slide(&params, &one, DropoutMode::Off).unwrap();
        c.check(
            via_patch.probs_primary == via_slide.probs_primary
                && via_patch.probs_secondary == via_slide.probs_secondary
                && via_patch.slide_vec == via_slide.slide_vec,
            "forward_patch must equal the singleton forward_slide exactly",
        );
    }

    // Simplex at bag sizes up to 1e4 and softmax stability for huge logits.
    let params = init_params::<f32>(&EncoderSpec::frozen(8), 1);
    let data: Vec<f32> = (0..10_000 * 8)
        .map(|i| ((i % 97) as f32) / 48.5 - 1.0)
        .collect();
    let big = Bag::Embeddings(Matrix::from_vec(10_000, 8, data));
    let fwd = forward_slide(&params, &big, DropoutMode::Off).unwrap();
    let sum: f64 = fwd.attention.iter().map(|&a| a as f64).sum();
    c.check(
        (sum - 1.0).abs() <= 1e-6,
        &format!("big-bag attention sum {sum}"),
    );
    let probs = gmb::model::softmax(&[1.0e4f32, -1.0e4, 0.0, 5.0]);
    c.check(
        probs.iter().all(|p| p.is_finite()),
        "softmax overflowed on huge logits",
    );
}

// ---------------------------------------------------------------- 7 & 8

struct EndToEnd {
    qwk: f64,
    significant_errors: usize,
    fraction_qwk: f64,
}

fn run_end_to_end(root: &Path, seed: u64) -> EndToEnd {
    let synth = gmb::synth::SynthConfig {
        n_patients: 250,
        n_validation_patients: 50,
        n_scanners: 2,
        slides_per_patient: 1,
        grid: (3, 2),
        // Uniform over ISUP grades (grades 4 and 5 split their weight over
        // three scores each).
        grade_mixture: vec![
            1.0,
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
        seed,
        ..gmb::synth::SynthConfig::default()
    };
    let config = RunConfig {
        seed,
        paths: PathsConfig::under(root),
        tile: Default::default(),
        train: gmb::cli::TrainSection {
            optimizer: TrainConfig {
                patience_epochs: 20,
                max_epochs: 45,
                seed,
                ..TrainConfig::default()
            },
            cv_folds: 2,
            ..Default::default()
        },
        inference: Default::default(),
        synth: Some(synth),
        energy: None,
    };
    assert_eq!(cmd_synth(&config).unwrap(), 0);
    assert_eq!(cmd_tile(&config).unwrap(), 0);
    assert_eq!(cmd_train(&config).unwrap(), 0);
    assert_eq!(cmd_predict(&config, None).unwrap(), 0);
    assert_eq!(cmd_evaluate(&config).unwrap(), 0);

    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(root.join("reports/evaluation.json")).unwrap(),
    )
    .unwrap();
    let cohort = &report["cohorts"][0];
    let qwk = cohort["qwk_isup"]["point"].as_f64().unwrap();
    let significant_errors = cohort["significant_errors"].as_u64().unwrap() as usize;

    // Data-scaling arm: 10% of the development patients, same seed.
    let fraction_root = root.join("fraction10");
    std::fs::create_dir_all(&fraction_root).unwrap();
    let mut fraction_config = config.clone();
    fraction_config.train.train_fraction = 0.1;
    fraction_config.paths.checkpoint_dir = fraction_root.join("checkpoints");
    fraction_config.paths.report_dir = fraction_root.join("reports");
    assert_eq!(cmd_train(&fraction_config).unwrap(), 0);
    assert_eq!(cmd_predict(&fraction_config, None).unwrap(), 0);
    assert_eq!(cmd_evaluate(&fraction_config).unwrap(), 0);
    let fraction_report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(fraction_root.join("reports/evaluation.json")).unwrap(),
    )
    .unwrap();
    let fraction_qwk = fraction_report["cohorts"][0]["qwk_isup"]["point"]
        .as_f64()
        .unwrap_or(f64::NEG_INFINITY);

    EndToEnd {
        qwk,
        significant_errors,
        fraction_qwk,
    }
}

#[test]
fn criterion_07_and_08_synthetic_end_to_end_and_data_scaling() {
    let c7 = Criterion::new(7, "synthetic end-to-end");
    let c8 = Criterion::new(8, "data-scaling trend");
    let start = Instant::now();
    let mut full_pass = 0u32;
    let mut scaling_pass = 0u32;
    for seed in 1..=5u64 {
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_end_to_end(dir.path(), seed);
        println!(
            "  seed {seed}: holdout qwk {:.4}, significant errors {}, 10% qwk {:.4}",
            outcome.qwk, outcome.significant_errors, outcome.fraction_qwk
        );
        if outcome.qwk >= 0.9 && outcome.significant_errors == 0 {
            full_pass += 1;
        }
        if outcome.qwk >= outcome.fraction_qwk {
            scaling_pass += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    c7.check(
        full_pass >= 4,
        &format!("only {full_pass}/5 seeds reached qwk >= 0.9 with zero significant errors"),
    );
    c7.check(
        elapsed < 600.0,
        &format!("wall time {elapsed:.1}s exceeds 10 minutes"),
    );
    c8.check(
        scaling_pass >= 4,
        &format!("only {scaling_pass}/5 seeds improved from 10% to 100% training data"),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_sampler_decorrelation() {
    let c = Criterion::new(9, "sampler decorrelation");
    let mut rng = ChaCha12Rng::seed_from_u64(0x0909);
    for trial in 0..100u64 {
        let n_scanners = rng.random_range(2..=4usize);
        let mut rows = Vec::new();
        let mut k = 0usize;
        for scanner in 0..n_scanners {
            for grade in 0..6u8 {
                let count = rng.random_range(1..5usize);
                for _ in 0..count {
                    let (gp, gs) = match grade {
                        0 => ("", ""),
                        1 => ("3", "3"),
                        2 => ("3", "4"),
                        3 => ("4", "3"),
                        4 => ("4", "4"),
                        _ => ("4", "5"),
                    };
                    rows.push(gmb::manifest::ManifestRow {
                        cohort: "C".into(),
                        original_patient_id: format!("p{k}"),
                        original_slide_id: format!("s{k}"),
                        filename: format!("f{k}.png"),
                        scanner_vendor: "SynthScan".into(),
                        scanner_model: format!("S{scanner}"),
                        scanner_serial: format!("SN{scanner}"),
                        scan_timestamp: format!("t{k}"),
                        pixel_size_um: "1.0".into(),
                        label_level: "slide".into(),
                        gleason_primary: gp.into(),
                        gleason_secondary: gs.into(),
                        isup: grade.to_string(),
                        group_key: String::new(),
                        split: "development".into(),
                        cv_fold: "0".into(),
                    });
                    k += 1;
                }
            }
        }
        let index = gmb::manifest::CohortManifest::new(rows).index().unwrap();
        let epoch = epoch_sample(&index, trial);

        // Contingency counts: scanner x grade.
        let mut counts = vec![[0f64; 6]; n_scanners];
        for (slide_id, wsi_id) in &epoch {
            let serial = &index.wsis[wsi_id].scanner_serial;
            let scanner: usize = serial[2..].parse().unwrap();
            let grade = index.slides[slide_id]
                .reference
                .as_ref()
                .unwrap()
                .isup
                .grade() as usize;
            counts[scanner][grade] += 1.0;
        }
        for (scanner, per_grade) in counts.iter().enumerate() {
            c.check(
                per_grade.windows(2).all(|w| w[0] == w[1]),
                &format!("trial {trial} scanner {scanner}: histogram {per_grade:?}"),
            );
        }

        // Chi-square of the grade x scanner association is identically
        // zero: observed equals expected cell by cell.
        let grand: f64 = counts.iter().flatten().sum();
        let mut chi2 = 0.0f64;
        for per_grade in &counts {
            let row_total: f64 = per_grade.iter().sum();
            for (g, &obs) in per_grade.iter().enumerate() {
                let col_total: f64 = counts.iter().map(|r| r[g]).sum();
                let expected = row_total * col_total / grand;
                chi2 += (obs - expected).powi(2) / expected;
            }
        }
        c.check(chi2 == 0.0, &format!("trial {trial}: chi-square {chi2}"));
    }
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_cross_scanner_harness() {
    let c = Criterion::new(10, "cross-scanner harness");
    let slides: Vec<String> = (0..200).map(|i| format!("s{i}")).collect();

    // Identical predictions across scanners: every pairwise kappa is 1.
    let base: Vec<usize> = (0..200).map(|i| i % 6).collect();
    let identical: Vec<(String, Vec<usize>)> =
        (0..5).map(|k| (format!("S{k}"), base.clone())).collect();
    let report = cross_scanner(&vec![slides.clone(); 5], &identical, 6).unwrap();
    c.check(report.pairs.len() == 10, "5 scanners must make 10 pairs");
    c.check(
        report.pairs.iter().all(|(_, _, k)| (k - 1.0).abs() < 1e-12),
        "identical predictions must give kappa 1.0",
    );

    // Label noise on one scanner must push its pairs below the clean ones.
    let mut rng = ChaCha12Rng::seed_from_u64(0x1010);
    let mut hits = 0u32;
    for _ in 0..100 {
        let truth: Vec<usize> = (0..200).map(|_| rng.random_range(0..6)).collect();
        let clean = |rng: &mut ChaCha12Rng| -> Vec<usize> {
            truth
                .iter()
                .map(|&v| {
                    if rng.random::<f64>() < 0.03 {
                        rng.random_range(0..6)
                    } else {
                        v
                    }
                })
                .collect()
        };
        let noisy: Vec<usize> = truth
            .iter()
            .map(|&v| {
                if rng.random::<f64>() < 0.20 {
                    rng.random_range(0..6)
                } else {
                    v
                }
            })
            .collect();
        let scanners = vec![
            ("S0".to_string(), noisy),
            ("S1".to_string(), clean(&mut rng)),
            ("S2".to_string(), clean(&mut rng)),
            ("S3".to_string(), clean(&mut rng)),
        ];
        let report = cross_scanner(&vec![slides.clone(); 4], &scanners, 6).unwrap();
        let noisy_max = report
            .pairs
            .iter()
            .filter(|(a, b, _)| a == "S0" || b == "S0")
            .map(|(_, _, k)| *k)
            .fold(f64::NEG_INFINITY, f64::max);
        let clean_min = report
            .pairs
            .iter()
            .filter(|(a, b, _)| a != "S0" && b != "S0")
            .map(|(_, _, k)| *k)
            .fold(f64::INFINITY, f64::min);
        if noisy_max < clean_min {
            hits += 1;
        }
    }
    c.check(
        hits >= 95,
        &format!("noisy scanner separated in only {hits}/100 trials"),
    );
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_integrity_suite() {
    use gmb::manifest::{apply_exclusions, validate_manifest, ManifestRow, ViolationCategory};
    let c = Criterion::new(11, "integrity suite");

    let row = |patient: &str,
               slide: &str,
               file: &str,
               serial: &str,
               ts: &str,
               isup: &str,
               gs: (&str, &str),
               split: &str,
               fold: &str| {
        ManifestRow {
            cohort: "C".into(),
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
    };
    let clean = || {
        gmb::manifest::CohortManifest::new(vec![
            row(
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
            row(
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
            row(
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
            row(
                "p3",
                "s3",
                "f4.png",
                "SN1",
                "t4",
                "4",
                ("4", "4"),
                "external_validation",
                "",
            ),
        ])
    };
    c.check(
        validate_manifest(&clean()).is_empty(),
        "baseline manifest must be clean",
    );

    // (plant, expected category, expected rule, removable by exclusions)
    type Plant = (
        &'static str,
        Box<dyn Fn(&mut gmb::manifest::CohortManifest)>,
        ViolationCategory,
        &'static str,
        bool,
    );
    let plants: Vec<Plant> = vec![
        (
            "duplicate id",
            Box::new(|m| {
                let dup = m.rows[3].clone();
                m.rows.push(dup);
            }),
            ViolationCategory::IdUniqueness,
            "duplicate-id",
            true,
        ),
        (
            "partition overlap",
            Box::new(|m| {
                m.rows[1].split = "external_validation".into();
                m.rows[1].cv_fold = String::new();
            }),
            ViolationCategory::PartitionOverlap,
            "partition-overlap",
            false,
        ),
        (
            "fold overlap",
            Box::new(|m| {
                m.rows[1].cv_fold = "7".into();
            }),
            ViolationCategory::PartitionOverlap,
            "fold-overlap",
            false,
        ),
        (
            "gs/isup mismatch",
            Box::new(|m| {
                m.rows[3].isup = "2".into();
            }),
            ViolationCategory::LabelMismatch,
            "gs-isup-mismatch",
            true,
        ),
        (
            "benign with score",
            Box::new(|m| {
                m.rows[3].isup = "0".into();
            }),
            ViolationCategory::LabelMismatch,
            "benign-with-score",
            true,
        ),
        (
            "stale rescan",
            Box::new(|m| {
                let mut stale = m.rows[0].clone();
                stale.scan_timestamp = "t0".into();
                stale.filename = "f1-old.png".into();
                m.rows.push(stale);
            }),
            ViolationCategory::SlideConsistency,
            "stale-rescan",
            true,
        ),
    ];

    for (name, plant, category, rule, removable) in plants {
        let mut manifest = clean();
        plant(&mut manifest);
        let violations = validate_manifest(&manifest);
        c.check(
            violations.len() == 1,
            &format!(
                "{name}: expected exactly one violation, got {:?}",
                violations.iter().map(|v| v.to_string()).collect::<Vec<_>>()
            ),
        );
        c.check(
            violations[0].category == category && violations[0].rule == rule,
            &format!(
                "{name}: got {}/{}",
                violations[0].category, violations[0].rule
            ),
        );

        let (cleaned, log) = apply_exclusions(&manifest);
        if removable {
            c.check(
                !log.is_empty(),
                &format!("{name}: exclusions should remove the corrupted rows"),
            );
            let after = validate_manifest(&cleaned);
            c.check(
                after.is_empty(),
                &format!("{name}: violations remain after exclusion: {after:?}"),
            );
        } else {
            // Partition/fold overlaps are not decidable row drops; they
            // must survive for a human to resolve.
            let after = validate_manifest(&cleaned);
            c.check(
                after.iter().any(|v| v.rule == rule),
                &format!("{name}: overlap violation should persist"),
            );
        }
    }
}

// ---------------------------------------------------------------- 12

#[test]
fn criterion_12_bootstrap_calibration() {
    let c = Criterion::new(12, "bootstrap calibration");
    // Population: rate alpha of forced agreement, otherwise independent
    // uniform draws over 4 categories. The population kappa follows in
    // closed form from the cell probabilities.
    let categories = 4usize;
    let alpha = 0.55f64;
    let mut cell = vec![vec![0.0f64; categories]; categories];
    for (i, row) in cell.iter_mut().enumerate() {
        for (j, value) in row.iter_mut().enumerate() {
            let independent = 1.0 / (categories * categories) as f64;
            *value = (1.0 - alpha) * independent
                + if i == j {
                    alpha / categories as f64
                } else {
                    0.0
                };
        }
    }
    let weight = |i: usize, j: usize| {
        let d = (i as f64 - j as f64) / (categories as f64 - 1.0);
        d * d
    };
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..categories {
        for j in 0..categories {
            let pi: f64 = (0..categories).map(|k| cell[i][k]).sum();
            let pj: f64 = (0..categories).map(|k| cell[k][j]).sum();
            observed += weight(i, j) * cell[i][j];
            expected += weight(i, j) * pi * pj;
        }
    }
    let population_kappa = 1.0 - observed / expected;

    let n = 120usize;
    let mut covered = 0u32;
    let mut rng = ChaCha12Rng::seed_from_u64(0x1212);
    let start = Instant::now();
    let mut slowest = 0.0f64;
    for sim in 0..200u64 {
        let mut reference = Vec::with_capacity(n);
        let mut predicted = Vec::with_capacity(n);
        for _ in 0..n {
            if rng.random::<f64>() < alpha {
                let v = rng.random_range(0..categories);
                reference.push(v);
                predicted.push(v);
            } else {
                reference.push(rng.random_range(0..categories));
                predicted.push(rng.random_range(0..categories));
            }
        }
        let run = Instant::now();
        let summary = bootstrap_ci(
            n,
            |idx| {
                let r: Vec<usize> = idx.iter().map(|&i| reference[i]).collect();
                let p: Vec<usize> = idx.iter().map(|&i| predicted[i]).collect();
                let ratings = PairedRatings::new(r, p, categories).ok()?;
                cohen_kappa(&ratings, KappaWeighting::Quadratic).ok()
            },
            1000,
            sim,
        )
        .unwrap();
        slowest = slowest.max(run.elapsed().as_secs_f64());
        if summary.lower <= population_kappa && population_kappa <= summary.upper {
            covered += 1;
        }
    }
    let coverage = covered as f64 / 2.0;
    println!(
        "  bootstrap calibration: {coverage:.1}% coverage, slowest run {slowest:.3}s, total {:.1}s",
        start.elapsed().as_secs_f64()
    );
    c.check(
        (90.0..=99.0).contains(&coverage),
        &format!("coverage {coverage:.1}% outside [90, 99]"),
    );
    c.check(
        slowest < 1.0,
        &format!("a bootstrap run took {slowest:.2}s (>= 1s)"),
    );
}
