//! Offline detection of a single distribution shift in an observable
//! series, by maximum derivative, two-sided CUSUM, and a Welch t-test scan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::timeseries::smooth3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ShiftMethod {
    MaxDerivative,
    Cusum {
        reference_n: usize,
        allowance: f64,
        threshold: f64,
    },
    Ttest {
        margin: usize,
    },
}

impl ShiftMethod {
    pub fn cusum() -> Self {
        ShiftMethod::Cusum {
            reference_n: 10,
            allowance: 0.5,
            threshold: 5.0,
        }
    }

    pub fn ttest() -> Self {
        ShiftMethod::Ttest { margin: 5 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShiftMethod::MaxDerivative => "max_derivative",
            ShiftMethod::Cusum { .. } => "cusum",
            ShiftMethod::Ttest { .. } => "ttest",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftDetection {
    pub params: ShiftMethod,
    /// Index into the series of the first post-shift point.
    pub detected_index: Option<usize>,
    pub detected_step: Option<u64>,
    /// |Δ| of the smoothed series, CUSUM excursion in reference standard
    /// deviations, or max |t|.
    pub statistic: f64,
}

fn check_steps(series: &[f64], steps: &[u64]) -> Result<()> {
    if series.len() != steps.len() {
        return Err(Error::Dimension(format!(
            "{} values but {} steps",
            series.len(),
            steps.len()
        )));
    }
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite value at index {i}")));
    }
    Ok(())
}

/// Largest absolute first difference of the 3-point smoothed series. The
/// reported index is the later point of the difference; ties (within 1e-9
/// relative) go to the earliest.
pub fn detect_max_derivative(series: &[f64], steps: &[u64]) -> Result<ShiftDetection> {
    check_steps(series, steps)?;
    if series.len() < 5 {
        return Err(Error::InsufficientData(format!("{} points, need 5", series.len())));
    }
    let s = smooth3(series);
    let d: Vec<f64> = s.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let max = d.iter().fold(0.0f64, |m, v| m.max(*v));
    let idx = d
        .iter()
        .position(|&v| v >= max * (1.0 - 1e-9))
        .expect("non-empty differences")
        + 1;
    Ok(ShiftDetection {
        params: ShiftMethod::MaxDerivative,
        detected_index: Some(idx),
        detected_step: Some(steps[idx]),
        statistic: max,
    })
}

/// Two-sided CUSUM against the mean and sample standard deviation of the
/// first `reference_n` points, accumulated from the end of the reference
/// block. Allowance and threshold are in reference standard deviations.
pub fn detect_cusum(
    series: &[f64],
    steps: &[u64],
    reference_n: usize,
    allowance: f64,
    threshold: f64,
) -> Result<ShiftDetection> {
    check_steps(series, steps)?;
    if reference_n < 5 || series.len() <= reference_n {
        return Err(Error::InsufficientData(format!(
            "CUSUM needs 5 <= reference_n < length, got reference_n {reference_n} for {} points",
            series.len()
        )));
    }
    let reference = &series[..reference_n];
    let mu = stats::mean(reference);
    let sd = stats::std_dev(reference);
    if !(sd > 0.0) {
        return Err(Error::InsufficientData(
            "reference block has zero variance".into(),
        ));
    }
    let params = ShiftMethod::Cusum {
        reference_n,
        allowance,
        threshold,
    };
    let (mut pos, mut neg, mut peak) = (0.0f64, 0.0f64, 0.0f64);
    for (i, &x) in series.iter().enumerate().skip(reference_n) {
        let z = x - mu;
        pos = (pos + z - allowance * sd).max(0.0);
        neg = (neg - z - allowance * sd).max(0.0);
        let excursion = pos.max(neg);
        peak = peak.max(excursion);
        if excursion > threshold * sd {
            return Ok(ShiftDetection {
                params,
                detected_index: Some(i),
                detected_step: Some(steps[i]),
                statistic: excursion / sd,
            });
        }
    }
    Ok(ShiftDetection {
        params,
        detected_index: None,
        detected_step: None,
        statistic: peak / sd,
    })
}

/// Welch t between the two sides of every split τ in [margin, T - margin];
/// detection at the largest |t|, earliest on ties.
pub fn detect_ttest(series: &[f64], steps: &[u64], margin: usize) -> Result<ShiftDetection> {
    check_steps(series, steps)?;
    let n = series.len();
    if margin < 5 || n < 2 * margin {
        return Err(Error::InsufficientData(format!(
            "t-test scan needs margin >= 5 and length >= 2*margin, got margin {margin} for {n} points"
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for tau in margin..=n - margin {
        let Some(t) = stats::welch_t(&series[..tau], &series[tau..]) else {
            continue;
        };
        if best.map_or(true, |(_, b)| t.abs() > b) {
            best = Some((tau, t.abs()));
        }
    }
    Ok(ShiftDetection {
        params: ShiftMethod::Ttest { margin },
        detected_index: best.map(|b| b.0),
        detected_step: best.map(|b| steps[b.0]),
        statistic: best.map_or(0.0, |b| b.1),
    })
}

/// Runs the configured detector.
pub fn detect(series: &[f64], steps: &[u64], method: ShiftMethod) -> Result<ShiftDetection> {
    match method {
        ShiftMethod::MaxDerivative => detect_max_derivative(series, steps),
        ShiftMethod::Cusum {
            reference_n,
            allowance,
            threshold,
        } => detect_cusum(series, steps, reference_n, allowance, threshold),
        ShiftMethod::Ttest { margin } => detect_ttest(series, steps, margin),
    }
}

/// Signed detection error in training steps; `None` without a detection.
pub fn score_detection(det: &ShiftDetection, true_step: u64) -> Option<i64> {
    det.detected_step.map(|s| s as i64 - true_step as i64)
}
