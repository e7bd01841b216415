//! Nonparametric bootstrap over evaluation cases.
//!
//! Cases (slides, locations or patients) are resampled with replacement;
//! the metric is recomputed per replicate; the interval is the 2.5/97.5
//! percentile of the replicate distribution. Replicates where the metric
//! is undefined are discarded and counted. Each replicate draws from its
//! own RNG stream derived from (seed, replicate index), so results do not
//! depend on evaluation order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::StatsError;
use crate::md5::md5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapSummary {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub replicates: u32,
    pub undefined_replicates: u32,
}

/// Derive an independent stream seed from a base seed and stream parts.
pub(crate) fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(8 + parts.len() * 8);
    bytes.extend_from_slice(&base.to_le_bytes());
    for p in parts {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    let digest = md5(&bytes);
    u64::from_le_bytes(digest[0..8].try_into().unwrap())
}

/// Linear-interpolation percentile of a sorted sample.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// 95% percentile bootstrap of `metric` over `n_cases` evaluation cases.
///
/// `metric` receives a resampled multiset of case indices and returns
/// `None` when undefined on that sample. Fails when the metric is
/// undefined on the full sample or on more than half of the replicates.
///
/// ```
/// use gmb::stats::bootstrap_ci;
///
/// // CI for a mean over 40 cases; cases enter by index so any per-case
/// // payload works.
/// let values: Vec<f64> = (0..40).map(|i| (i % 7) as f64).collect();
/// let summary = bootstrap_ci(
///     values.len(),
///     |idx| Some(idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64),
///     1000,
///     42,
/// ).unwrap();
/// assert!(summary.lower <= summary.point && summary.point <= summary.upper);
/// assert_eq!(summary.undefined_replicates, 0);
/// ```
pub fn bootstrap_ci<F>(
    n_cases: usize,
    metric: F,
    replicates: u32,
    seed: u64,
) -> Result<BootstrapSummary, StatsError>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if n_cases == 0 {
        return Err(StatsError::Bootstrap("no cases".into()));
    }
    if replicates == 0 {
        return Err(StatsError::Bootstrap("replicates must be >= 1".into()));
    }
    let identity: Vec<usize> = (0..n_cases).collect();
    let point = metric(&identity)
        .ok_or_else(|| StatsError::Bootstrap("metric undefined on the full sample".into()))?;

    let values: Vec<Option<f64>> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, &[rep as u64]));
            let sample: Vec<usize> = (0..n_cases).map(|_| rng.random_range(0..n_cases)).collect();
            metric(&sample)
        })
        .collect();

    let mut defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    let undefined = replicates - defined.len() as u32;
    if undefined as f64 > replicates as f64 / 2.0 {
        return Err(StatsError::Bootstrap(format!(
            "{undefined} of {replicates} replicates undefined"
        )));
    }
    defined.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    Ok(BootstrapSummary {
        point,
        lower: percentile(&defined, 0.025),
        upper: percentile(&defined, 0.975),
        replicates,
        undefined_replicates: undefined,
    })
}
