//! Statistical engine: agreement, discrimination, uncertainty and audits.
//!
//! Cohen's kappa in unweighted/linear/quadratic form, sensitivity and
//! specificity, AUROC, nonparametric bootstrap confidence intervals,
//! leave-self-out panel concordance, cross-scanner concordance matrices
//! and the clinically-significant-error audit. All functions are pure;
//! bootstrap replicates run on derived RNG streams so parallelism never
//! changes results.

mod audit;
mod bootstrap;
mod kappa;
mod panel;
mod report;
mod roc;

pub use audit::{audit_intersection, significant_error_audit, AuditRow, AuditTable};
pub(crate) use bootstrap::derive_seed;
pub use bootstrap::{bootstrap_ci, BootstrapSummary};
pub use kappa::{cohen_kappa, KappaWeighting, PairedRatings};
pub use panel::{cross_scanner, panel_pairwise, CrossScannerReport, PanelMember, PanelResult};
pub use report::{evaluate_cohorts, CohortMetrics, EvalCase, EvalReport, MetricEstimate};
pub use roc::{auroc, sens_spec, SensSpec};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("paired ratings must have equal non-zero length (got {reference} vs {predicted})")]
    LengthMismatch { reference: usize, predicted: usize },
    #[error("rating {value} out of range for {categories} categories")]
    CategoryRange { value: usize, categories: usize },
    #[error("kappa undefined: expected disagreement is zero")]
    UndefinedKappa,
    #[error("auroc needs at least one positive and one negative label")]
    DegenerateLabels,
    #[error("bootstrap: {0}")]
    Bootstrap(String),
    #[error("panel: {0}")]
    Panel(String),
    #[error("cross-scanner: {0}")]
    CrossScanner(String),
}
