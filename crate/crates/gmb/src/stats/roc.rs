//! Cancer-detection metrics: sensitivity/specificity and AUROC.

use serde::Serialize;

use super::StatsError;

/// Sensitivity and specificity with explicit undefined markers for
/// degenerate label sets (no positives / no negatives).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensSpec {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// True positive rate and true negative rate of binary predictions.
pub fn sens_spec(reference: &[bool], predicted: &[bool]) -> Result<SensSpec, StatsError> {
    if reference.len() != predicted.len() || reference.is_empty() {
        return Err(StatsError::LengthMismatch {
            reference: reference.len(),
            predicted: predicted.len(),
        });
    }
    let (mut tp, mut fnc, mut tn, mut fp) = (0u64, 0u64, 0u64, 0u64);
    for (&r, &p) in reference.iter().zip(predicted) {
        match (r, p) {
            (true, true) => tp += 1,
            (true, false) => fnc += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    let sensitivity = if tp + fnc > 0 {
        Some(tp as f64 / (tp + fnc) as f64)
    } else {
        None
    };
    let specificity = if tn + fp > 0 {
        Some(tn as f64 / (tn + fp) as f64)
    } else {
        None
    };
    Ok(SensSpec {
        sensitivity,
        specificity,
    })
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half (rank / Mann-Whitney formulation).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, StatsError> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(StatsError::LengthMismatch {
            reference: labels.len(),
            predicted: scores.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(StatsError::DegenerateLabels);
    }

    // Average ranks with midpoints for ties.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied block [i..=j] shares the mean rank.
        let mean_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += mean_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive pair-counting oracle.
    pub(crate) fn auroc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut concordant = 0.0f64;
        let mut pairs = 0.0f64;
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

    #[test]
    fn perfect_separation() {
        let scores = [0.9, 0.8, 0.3, 0.2];
        let labels = [true, true, false, false];
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn interleaved_case_matches_pair_counting() {
        let scores = [0.9, 0.8, 0.3, 0.2];
        let labels = [true, false, true, false];
        let got = auroc(&scores, &labels).unwrap();
        assert!((got - 0.75).abs() < 1e-12);
        assert!((got - auroc_oracle(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn all_ties_give_half() {
        let scores = [0.5, 0.5, 0.5, 0.5];
        let labels = [true, false, true, false];
        assert!((auroc(&scores, &labels).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn monotone_transform_invariance() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(8);
        let scores: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<bool> = (0..50).map(|_| rng.random::<f64>() < 0.4).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let base = auroc(&scores, &labels).unwrap();
            let squashed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).tanh()).collect();
            let transformed = auroc(&squashed, &labels).unwrap();
            assert!((base - transformed).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_labels_error() {
        assert_eq!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(StatsError::DegenerateLabels)
        );
    }

    #[test]
    fn sens_spec_hand_cases() {
        let s = sens_spec(&[true, true, false, false], &[true, true, false, false]).unwrap();
        assert_eq!(s.sensitivity, Some(1.0));
        assert_eq!(s.specificity, Some(1.0));

        let s = sens_spec(&[true, false, true, false], &[true, true, true, true]).unwrap();
        assert_eq!(s.sensitivity, Some(1.0));
        assert_eq!(s.specificity, Some(0.0));

        let s = sens_spec(&[true, true, false, false], &[true, false, false, false]).unwrap();
        assert_eq!(s.sensitivity, Some(0.5));
        assert_eq!(s.specificity, Some(1.0));
    }

    #[test]
    fn sens_spec_undefined_markers() {
        let s = sens_spec(&[false, false], &[false, true]).unwrap();
        assert_eq!(s.sensitivity, None);
        assert_eq!(s.specificity, Some(0.5));
    }
}
