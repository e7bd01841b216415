//! Per-cohort evaluation report with bootstrap confidence intervals.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::grading::IsupGrade;

use super::audit::significant_error_audit;
use super::bootstrap::bootstrap_ci;
use super::kappa::{cohen_kappa, KappaWeighting, PairedRatings};
use super::roc::{auroc, sens_spec};
use super::StatsError;

/// One evaluation case: a prediction unit joined with its reference.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub unit_key: String,
    pub cohort: String,
    pub level: String,
    /// Reference score ordinal (0..=9) when the cohort reports scores.
    pub reference_gs: Option<u8>,
    pub reference_isup: u8,
    pub predicted_gs: u8,
    pub predicted_isup: u8,
    /// Score in [0, 1] used for the ROC analysis.
    pub malignancy: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricEstimate {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub undefined_replicates: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct CohortMetrics {
    pub cohort: String,
    pub level: String,
    pub n_units: usize,
    pub qwk_isup: Option<MetricEstimate>,
    pub lwk_isup: Option<MetricEstimate>,
    pub qwk_gs: Option<MetricEstimate>,
    pub lwk_gs: Option<MetricEstimate>,
    pub sensitivity: Option<MetricEstimate>,
    pub specificity: Option<MetricEstimate>,
    pub auroc: Option<MetricEstimate>,
    /// 6x6 reference x predicted ISUP counts.
    pub confusion_isup: Vec<Vec<u64>>,
    /// 10x10 reference x predicted score-ordinal counts (score-reporting
    /// cohorts only).
    pub confusion_gs: Option<Vec<Vec<u64>>>,
    pub significant_errors: usize,
    pub significant_error_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub cohorts: Vec<CohortMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }

    /// Flat CSV of (cohort, level, metric, point, lower, upper).
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("cohort,level,metric,point,lower,upper\n");
        for c in &self.cohorts {
            let mut push = |name: &str, est: &Option<MetricEstimate>| {
                if let Some(e) = est {
                    out.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        c.cohort, c.level, name, e.point, e.lower, e.upper
                    ));
                }
            };
            push("qwk_isup", &c.qwk_isup);
            push("lwk_isup", &c.lwk_isup);
            push("qwk_gs", &c.qwk_gs);
            push("lwk_gs", &c.lwk_gs);
            push("sensitivity", &c.sensitivity);
            push("specificity", &c.specificity);
            push("auroc", &c.auroc);
        }
        out
    }
}

fn bootstrap_metric<F>(
    n: usize,
    metric: F,
    replicates: u32,
    seed: u64,
) -> Result<Option<MetricEstimate>, StatsError>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    let identity: Vec<usize> = (0..n).collect();
    if metric(&identity).is_none() {
        // Undefined on the full sample: reported as absent, not an error.
        return Ok(None);
    }
    let summary = bootstrap_ci(n, metric, replicates, seed)?;
    // The interval must bracket the point estimate.
    Ok(Some(MetricEstimate {
        point: summary.point,
        lower: summary.lower.min(summary.point),
        upper: summary.upper.max(summary.point),
        undefined_replicates: summary.undefined_replicates,
    }))
}

/// Group cases by (cohort, level) and compute the full metric battery.
pub fn evaluate_cohorts(
    cases: &[EvalCase],
    replicates: u32,
    seed: u64,
) -> Result<EvalReport, StatsError> {
    let mut groups: BTreeMap<(String, String), Vec<&EvalCase>> = BTreeMap::new();
    for case in cases {
        groups
            .entry((case.cohort.clone(), case.level.clone()))
            .or_default()
            .push(case);
    }

    let mut cohorts = Vec::new();
    for ((cohort, level), group) in groups {
        let n = group.len();
        let kappa_metric = |extract_ref: fn(&EvalCase) -> Option<u8>,
                            extract_pred: fn(&EvalCase) -> u8,
                            categories: usize,
                            weighting: KappaWeighting| {
            let group = group.clone();
            move |idx: &[usize]| -> Option<f64> {
                let mut reference = Vec::with_capacity(idx.len());
                let mut predicted = Vec::with_capacity(idx.len());
                for &i in idx {
                    reference.push(extract_ref(group[i])? as usize);
                    predicted.push(extract_pred(group[i]) as usize);
                }
                let ratings = PairedRatings::new(reference, predicted, categories).ok()?;
                cohen_kappa(&ratings, weighting).ok()
            }
        };

        let qwk_isup = bootstrap_metric(
            n,
            kappa_metric(
                |c| Some(c.reference_isup),
                |c| c.predicted_isup,
                6,
                KappaWeighting::Quadratic,
            ),
            replicates,
            seed,
        )?;
        let lwk_isup = bootstrap_metric(
            n,
            kappa_metric(
                |c| Some(c.reference_isup),
                |c| c.predicted_isup,
                6,
                KappaWeighting::Linear,
            ),
            replicates,
            seed.wrapping_add(1),
        )?;
        let has_gs = group.iter().all(|c| c.reference_gs.is_some());
        let (qwk_gs, lwk_gs) = if has_gs {
            (
                bootstrap_metric(
                    n,
                    kappa_metric(
                        |c| c.reference_gs,
                        |c| c.predicted_gs,
                        10,
                        KappaWeighting::Quadratic,
                    ),
                    replicates,
                    seed.wrapping_add(2),
                )?,
                bootstrap_metric(
                    n,
                    kappa_metric(
                        |c| c.reference_gs,
                        |c| c.predicted_gs,
                        10,
                        KappaWeighting::Linear,
                    ),
                    replicates,
                    seed.wrapping_add(3),
                )?,
            )
        } else {
            (None, None)
        };

        let sens = {
            let group = group.clone();
            move |idx: &[usize]| -> Option<f64> {
                let r: Vec<bool> = idx.iter().map(|&i| group[i].reference_isup >= 1).collect();
                let p: Vec<bool> = idx.iter().map(|&i| group[i].predicted_isup >= 1).collect();
                sens_spec(&r, &p).ok()?.sensitivity
            }
        };
        let spec = {
            let group = group.clone();
            move |idx: &[usize]| -> Option<f64> {
                let r: Vec<bool> = idx.iter().map(|&i| group[i].reference_isup >= 1).collect();
                let p: Vec<bool> = idx.iter().map(|&i| group[i].predicted_isup >= 1).collect();
                sens_spec(&r, &p).ok()?.specificity
            }
        };
        let roc = {
            let group = group.clone();
            move |idx: &[usize]| -> Option<f64> {
                let scores: Vec<f64> = idx.iter().map(|&i| group[i].malignancy).collect();
                let labels: Vec<bool> = idx.iter().map(|&i| group[i].reference_isup >= 1).collect();
                auroc(&scores, &labels).ok()
            }
        };
        let sensitivity = bootstrap_metric(n, sens, replicates, seed.wrapping_add(4))?;
        let specificity = bootstrap_metric(n, spec, replicates, seed.wrapping_add(5))?;
        let auroc_est = bootstrap_metric(n, roc, replicates, seed.wrapping_add(6))?;

        let mut confusion_isup = vec![vec![0u64; 6]; 6];
        for c in &group {
            confusion_isup[c.reference_isup as usize][c.predicted_isup as usize] += 1;
        }
        let confusion_gs = if has_gs {
            let mut table = vec![vec![0u64; 10]; 10];
            for c in &group {
                table[c.reference_gs.unwrap() as usize][c.predicted_gs as usize] += 1;
            }
            Some(table)
        } else {
            None
        };

        let audit_cases: Vec<(String, IsupGrade, IsupGrade)> = group
            .iter()
            .map(|c| {
                (
                    c.unit_key.clone(),
                    IsupGrade::new(c.reference_isup).expect("valid grade"),
                    IsupGrade::new(c.predicted_isup).expect("valid grade"),
                )
            })
            .collect();
        let audit = significant_error_audit(&audit_cases);

        cohorts.push(CohortMetrics {
            cohort,
            level,
            n_units: n,
            qwk_isup,
            lwk_isup,
            qwk_gs,
            lwk_gs,
            sensitivity,
            specificity,
            auroc: auroc_est,
            confusion_isup,
            confusion_gs,
            significant_errors: audit.rows.len(),
            significant_error_rate: audit.rate,
        });
    }
    Ok(EvalReport { cohorts })
}
