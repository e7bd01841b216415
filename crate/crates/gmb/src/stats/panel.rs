//! Panel concordance and cross-scanner reproducibility.

use std::collections::BTreeSet;

use serde::Serialize;

use super::kappa::{cohen_kappa, KappaWeighting, PairedRatings};
use super::StatsError;

/// One rater in a panel: a name and an aligned rating vector.
#[derive(Debug, Clone)]
pub struct PanelMember {
    pub name: String,
    pub ratings: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PanelResult {
    pub name: String,
    pub is_ai: bool,
    pub mean_qwk: f64,
    /// Pairs whose kappa was undefined and therefore skipped.
    pub skipped_pairs: Vec<String>,
}

/// Mean pairwise quadratic kappa of each member against the pathologists.
///
/// Every member (pathologist or AI) is compared against all pathologists
/// other than itself; AI members never enter anyone else's mean, so adding
/// a model to the panel cannot shift the pathologists' statistics.
pub fn panel_pairwise(
    panel: &[PanelMember],
    ai_names: &BTreeSet<String>,
    category_count: usize,
) -> Result<Vec<PanelResult>, StatsError> {
    if panel.len() < 3 {
        return Err(StatsError::Panel(format!(
            "need at least 3 members, got {}",
            panel.len()
        )));
    }
    let len = panel[0].ratings.len();
    if panel.iter().any(|m| m.ratings.len() != len) || len == 0 {
        return Err(StatsError::Panel("misaligned rating vectors".into()));
    }

    let mut results = Vec::with_capacity(panel.len());
    for member in panel {
        let mut kappas = Vec::new();
        let mut skipped = Vec::new();
        for other in panel {
            if other.name == member.name || ai_names.contains(&other.name) {
                continue;
            }
            let ratings = PairedRatings::new(
                member.ratings.clone(),
                other.ratings.clone(),
                category_count,
            )?;
            match cohen_kappa(&ratings, KappaWeighting::Quadratic) {
                Ok(k) => kappas.push(k),
                Err(StatsError::UndefinedKappa) => skipped.push(other.name.clone()),
                Err(e) => return Err(e),
            }
        }
        if kappas.is_empty() {
            return Err(StatsError::Panel(format!(
                "no defined pairwise kappa for {}",
                member.name
            )));
        }
        results.push(PanelResult {
            name: member.name.clone(),
            is_ai: ai_names.contains(&member.name),
            mean_qwk: kappas.iter().sum::<f64>() / kappas.len() as f64,
            skipped_pairs: skipped,
        });
    }
    Ok(results)
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossScannerReport {
    /// (scanner a, scanner b, qwk) for every unordered pair.
    pub pairs: Vec<(String, String, f64)>,
    pub mean_qwk: f64,
}

/// Pairwise quadratic kappa between per-scanner prediction vectors over
/// the same slides, plus the mean over pairs.
pub fn cross_scanner(
    slide_ids: &[Vec<String>],
    predictions: &[(String, Vec<usize>)],
    category_count: usize,
) -> Result<CrossScannerReport, StatsError> {
    if predictions.len() < 2 {
        return Err(StatsError::CrossScanner(format!(
            "need at least 2 scanners, got {}",
            predictions.len()
        )));
    }
    if slide_ids.len() != predictions.len() {
        return Err(StatsError::CrossScanner(
            "slide id lists do not match prediction vectors".into(),
        ));
    }
    let reference_slides = &slide_ids[0];
    for (i, ids) in slide_ids.iter().enumerate() {
        if ids != reference_slides || predictions[i].1.len() != reference_slides.len() {
            return Err(StatsError::CrossScanner(format!(
                "scanner {} rates a different slide set",
                predictions[i].0
            )));
        }
    }

    let mut pairs = Vec::new();
    let mut sum = 0.0f64;
    for i in 0..predictions.len() {
        for j in (i + 1)..predictions.len() {
            let ratings = PairedRatings::new(
                predictions[i].1.clone(),
                predictions[j].1.clone(),
                category_count,
            )?;
            let k = cohen_kappa(&ratings, KappaWeighting::Quadratic)?;
            sum += k;
            pairs.push((predictions[i].0.clone(), predictions[j].0.clone(), k));
        }
    }
    let mean_qwk = sum / pairs.len() as f64;
    Ok(CrossScannerReport { pairs, mean_qwk })
}
