//! Cohen's kappa with disagreement weights.
//!
//! kappa = 1 - sum(w * O) / sum(w * E), where O is the observed
//! contingency table, E the chance table from the outer product of each
//! rater's own marginals, and w the disagreement weight: 0/1 off-diagonal
//! (unweighted), |i-j|/(C-1) (linear) or ((i-j)/(C-1))^2 (quadratic).
//! Categories are fixed a priori so cohorts with missing grades stay
//! comparable.

use serde::{Deserialize, Serialize};

use super::StatsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaWeighting {
    None,
    Linear,
    Quadratic,
}

impl KappaWeighting {
    fn weight(self, i: usize, j: usize, categories: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        match self {
            KappaWeighting::None => 1.0,
            KappaWeighting::Linear => (i as f64 - j as f64).abs() / (categories as f64 - 1.0),
            KappaWeighting::Quadratic => {
                let d = (i as f64 - j as f64) / (categories as f64 - 1.0);
                d * d
            }
        }
    }
}

/// Two aligned rating vectors over a fixed category count.
#[derive(Debug, Clone)]
pub struct PairedRatings {
    pub reference: Vec<usize>,
    pub predicted: Vec<usize>,
    pub category_count: usize,
}

impl PairedRatings {
    pub fn new(
        reference: Vec<usize>,
        predicted: Vec<usize>,
        category_count: usize,
    ) -> Result<Self, StatsError> {
        if reference.len() != predicted.len() || reference.is_empty() {
            return Err(StatsError::LengthMismatch {
                reference: reference.len(),
                predicted: predicted.len(),
            });
        }
        for &v in reference.iter().chain(predicted.iter()) {
            if v >= category_count {
                return Err(StatsError::CategoryRange {
                    value: v,
                    categories: category_count,
                });
            }
        }
        Ok(PairedRatings {
            reference,
            predicted,
            category_count,
        })
    }

    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }

    /// Observed contingency counts, reference on rows.
    pub fn contingency(&self) -> Vec<Vec<f64>> {
        let c = self.category_count;
        let mut table = vec![vec![0.0f64; c]; c];
        for (&r, &p) in self.reference.iter().zip(&self.predicted) {
            table[r][p] += 1.0;
        }
        table
    }
}

/// Weighted Cohen's kappa. Errors with [`StatsError::UndefinedKappa`] when
/// the chance-expected disagreement is zero (both raters constant and
/// equal), rather than silently reporting 0 or 1.
///
/// ```
/// use gmb::stats::{cohen_kappa, KappaWeighting, PairedRatings};
///
/// // Six ISUP categories fixed a priori, even if not all are observed.
/// let ratings = PairedRatings::new(
///     vec![0, 1, 2, 3, 4, 5, 2, 1],
///     vec![0, 1, 2, 2, 4, 5, 3, 1],
///     6,
/// ).unwrap();
/// let qwk = cohen_kappa(&ratings, KappaWeighting::Quadratic).unwrap();
/// let lwk = cohen_kappa(&ratings, KappaWeighting::Linear).unwrap();
/// assert!(qwk > lwk, "quadratic weights forgive near-misses more");
/// assert!(qwk > 0.9 && qwk < 1.0);
/// ```
pub fn cohen_kappa(ratings: &PairedRatings, weighting: KappaWeighting) -> Result<f64, StatsError> {
    let c = ratings.category_count;
    let n = ratings.len() as f64;
    let observed = ratings.contingency();
    let mut row_marginal = vec![0.0f64; c];
    let mut col_marginal = vec![0.0f64; c];
    for i in 0..c {
        for j in 0..c {
            row_marginal[i] += observed[i][j];
            col_marginal[j] += observed[i][j];
        }
    }
    let mut weighted_observed = 0.0f64;
    let mut weighted_expected = 0.0f64;
    for i in 0..c {
        for j in 0..c {
            let w = weighting.weight(i, j, c);
            if w == 0.0 {
                continue;
            }
            weighted_observed += w * observed[i][j];
            weighted_expected += w * row_marginal[i] * col_marginal[j] / n;
        }
    }
    if weighted_expected == 0.0 {
        return Err(StatsError::UndefinedKappa);
    }
    Ok(1.0 - weighted_observed / weighted_expected)
}
