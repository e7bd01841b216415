//! Runtime and energy accounting.
//!
//! Integrates 1 Hz power samples into energy totals, normalizes per
//! biopsy, and scales single-run measurements to the full ensemble x TTA
//! cost. Logs come from external monitors as CSV (timestamp_s, watts).

use std::path::Path;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum EnergyError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("power log needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("timestamps must be strictly increasing (sample {index})")]
    NonMonotone { index: usize },
    #[error("negative power reading at sample {index}")]
    NegativePower { index: usize },
    #[error("slide count must be at least 1")]
    ZeroSlides,
}

/// A sequence of (timestamp seconds, watts) samples from one device.
#[derive(Debug, Clone)]
pub struct PowerLog {
    pub device_label: String,
    pub samples: Vec<(f64, f64)>,
}

impl PowerLog {
    pub fn load_csv(path: &Path, device_label: &str) -> Result<Self, EnergyError> {
        let text = std::fs::read_to_string(path).map_err(|source| EnergyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let mut samples = Vec::new();
        for record in reader.records() {
            let record = record?;
            let t: f64 = record[0].trim().parse().unwrap_or(f64::NAN);
            let w: f64 = record[1].trim().parse().unwrap_or(f64::NAN);
            samples.push((t, w));
        }
        Ok(PowerLog {
            device_label: device_label.to_string(),
            samples,
        })
    }

    /// Wall time covered by the log, in hours.
    pub fn duration_hours(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(first), Some(last)) => (last.0 - first.0) / 3600.0,
            _ => 0.0,
        }
    }
}

/// Trapezoidal integration of the power curve, in kWh.
///
/// ```
/// use gmb::energy::{integrate_energy, per_biopsy, scale_to_ensemble, PowerLog};
///
/// // One hour at a constant 100 W is 0.1 kWh.
/// let log = PowerLog {
///     device_label: "gpu0".into(),
///     samples: (0..=3600).map(|t| (t as f64, 100.0)).collect(),
/// };
/// let kwh = integrate_energy(&log).unwrap();
/// assert!((kwh - 0.1).abs() < 1e-9);
///
/// // Scale a single-model, single-pass measurement to a 10-model
/// // ensemble with 3 augmentation rounds, then normalize per biopsy.
/// let (total, _) = scale_to_ensemble(kwh, 1.0, 10, 3);
/// let wh = per_biopsy(total, 801).unwrap();
/// assert!((wh - 3.745).abs() < 0.01);
/// ```
pub fn integrate_energy(log: &PowerLog) -> Result<f64, EnergyError> {
    if log.samples.len() < 2 {
        return Err(EnergyError::TooFewSamples(log.samples.len()));
    }
    for (i, &(t, w)) in log.samples.iter().enumerate() {
        if !t.is_finite() || (i > 0 && t <= log.samples[i - 1].0) {
            return Err(EnergyError::NonMonotone { index: i });
        }
        if !w.is_finite() || w < 0.0 {
            return Err(EnergyError::NegativePower { index: i });
        }
    }
    let mut joules = 0.0f64;
    for pair in log.samples.windows(2) {
        let (t0, w0) = pair[0];
        let (t1, w1) = pair[1];
        joules += (w0 + w1) / 2.0 * (t1 - t0);
    }
    Ok(joules / 3.6e6)
}

/// Watt-hours per biopsy from a kWh total.
pub fn per_biopsy(total_kwh: f64, slide_count: usize) -> Result<f64, EnergyError> {
    if slide_count == 0 {
        return Err(EnergyError::ZeroSlides);
    }
    Ok(total_kwh * 1000.0 / slide_count as f64)
}

/// Scale a single-model, single-TTA measurement to the full ensemble cost.
pub fn scale_to_ensemble(
    kwh: f64,
    gpu_hours: f64,
    ensemble_size: u32,
    tta_runs: u32,
) -> (f64, f64) {
    let factor = (ensemble_size * tta_runs) as f64;
    (kwh * factor, gpu_hours * factor)
}

/// Per-device accounting with ratios against a named baseline.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyReport {
    pub baseline: String,
    pub devices: Vec<DeviceEnergy>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviceEnergy {
    pub label: String,
    pub total_kwh: f64,
    pub gpu_hours: f64,
    pub wh_per_biopsy: f64,
    /// Energy relative to the baseline device.
    pub ratio_vs_baseline: f64,
}

/// Build the report: integrate each log, scale to the ensemble, normalize
/// per biopsy and compute ratios against the named baseline label.
pub fn energy_report(
    logs: &[PowerLog],
    slide_count: usize,
    ensemble_size: u32,
    tta_runs: u32,
    baseline: &str,
) -> Result<EnergyReport, EnergyError> {
    let mut devices = Vec::with_capacity(logs.len());
    for log in logs {
        let kwh = integrate_energy(log)?;
        let (total_kwh, gpu_hours) =
            scale_to_ensemble(kwh, log.duration_hours(), ensemble_size, tta_runs);
        devices.push(DeviceEnergy {
            label: log.device_label.clone(),
            total_kwh,
            gpu_hours,
            wh_per_biopsy: per_biopsy(total_kwh, slide_count)?,
            ratio_vs_baseline: f64::NAN,
        });
    }
    let base_kwh = devices
        .iter()
        .find(|d| d.label == baseline)
        .map(|d| d.total_kwh)
        .unwrap_or(f64::NAN);
    for d in &mut devices {
        d.ratio_vs_baseline = d.total_kwh / base_kwh;
    }
    Ok(EnergyReport {
        baseline: baseline.to_string(),
        devices,
    })
}
