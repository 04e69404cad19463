//! Coupling between spectral series and an external metric such as
//! validation loss: alignment, cubic detrending, lag scans, sliding and
//! per-phase correlation, phase segmentation, and Granger tests.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::ObservableSeries;
use crate::stats::{self, lstsq};

/// Shortest series any statistical operation accepts.
pub const MIN_LEN: usize = 8;

/// Design matrices with a larger condition number are reported collinear.
pub const COLLINEAR_CONDITION: f64 = 1e10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub steps: Vec<u64>,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn new(name: impl Into<String>, steps: Vec<u64>, values: Vec<f64>) -> Result<Self> {
        if steps.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} steps but {} values",
                steps.len(),
                values.len()
            )));
        }
        if let Some(w) = steps.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "steps not strictly increasing: {} then {}",
                w[0], w[1]
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value at step {}",
                steps[i]
            )));
        }
        Ok(Self {
            name: name.into(),
            steps,
            values,
        })
    }

    /// Reads a two-column `step,value` CSV with a header row.
    pub fn read_csv(path: &Path, name: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, name).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse_csv(text: &str, name: &str) -> Result<Self> {
        const SCHEMA: &str = "expected a header row and two columns `step,value` \
                              (integer training step, real value)";
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Format(format!("empty file; {SCHEMA}")))?;
        if header.split(',').count() != 2 {
            return Err(Error::Format(format!(
                "header `{header}` has {} column(s); {SCHEMA}",
                header.split(',').count()
            )));
        }
        let mut steps = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 2 {
                return Err(Error::Format(format!(
                    "row {} has {} column(s); {SCHEMA}",
                    i + 2,
                    cols.len()
                )));
            }
            let step = cols[0]
                .parse::<u64>()
                .map_err(|_| Error::Format(format!("row {}: step `{}` is not an integer; {SCHEMA}", i + 2, cols[0])))?;
            let value = cols[1]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("row {}: value `{}` is not a number; {SCHEMA}", i + 2, cols[1])))?;
            steps.push(step);
            values.push(value);
        }
        Self::new(name, steps, values)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,value\n");
        for (s, v) in self.steps.iter().zip(&self.values) {
            out.push_str(&format!("{s},{v}\n"));
        }
        out
    }
}

/// Two series joined on their common steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aligned {
    pub steps: Vec<u64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Inner join on step values, without interpolation.
pub fn align(a: &MetricSeries, b: &MetricSeries) -> Result<Aligned> {
    let mut out = Aligned {
        steps: Vec::new(),
        a: Vec::new(),
        b: Vec::new(),
    };
    let (mut i, mut j) = (0, 0);
    while i < a.steps.len() && j < b.steps.len() {
        match a.steps[i].cmp(&b.steps[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.steps.push(a.steps[i]);
                out.a.push(a.values[i]);
                out.b.push(b.values[j]);
                i += 1;
                j += 1;
            }
        }
    }
    if out.steps.len() < MIN_LEN {
        return Err(Error::InsufficientData(format!(
            "`{}` and `{}` share {} steps, need at least {MIN_LEN}",
            a.name,
            b.name,
            out.steps.len()
        )));
    }
    Ok(out)
}

/// Residual after subtracting the least-squares cubic in the sample index.
pub fn detrend_cubic(values: &[f64]) -> Result<Vec<f64>> {
    let n = values.len();
    if n < 5 {
        return Err(Error::InsufficientData(format!("{n} points, cubic detrending needs 5")));
    }
    // Index rescaled to [-1, 1] keeps the design well conditioned.
    let half = (n - 1) as f64 / 2.0;
    let u: Vec<f64> = (0..n).map(|i| (i as f64 - half) / half).collect();
    let cols = vec![
        u.clone(),
        u.iter().map(|x| x * x).collect(),
        u.iter().map(|x| x * x * x).collect(),
    ];
    Ok(lstsq(&cols, values, true).residuals)
}

/// Detrends then z-scores: the input form for correlation and Granger.
pub fn prepare(values: &[f64]) -> Result<Vec<f64>> {
    Ok(stats::zscore(&detrend_cubic(values)?))
}

/// Default lag range for a series of length `t`: min(10, ⌊t/4⌋).
pub fn default_max_lag(t: usize) -> usize {
    10.min(t / 4)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagCorrelation {
    pub lags: Vec<i64>,
    /// Pearson r per lag; `None` when either side is constant.
    pub r_at_lag: Vec<Option<f64>>,
    pub n_overlap: Vec<usize>,
    /// Lags dropped because fewer than 8 points overlapped.
    pub omitted_lags: Vec<i64>,
    pub peak_lag: Option<i64>,
    pub peak_r: Option<f64>,
}

/// Pearson correlation of `x[t - lag]` with `y[t]` for every lag in
/// `[-max_lag, max_lag]`; a positive peak lag means `x` leads `y`.
pub fn xcorr_lagscan(x: &[f64], y: &[f64], max_lag: usize) -> Result<LagCorrelation> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "lag scan over series of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    let l = max_lag as i64;
    let mut out = LagCorrelation {
        lags: Vec::new(),
        r_at_lag: Vec::new(),
        n_overlap: Vec::new(),
        omitted_lags: Vec::new(),
        peak_lag: None,
        peak_r: None,
    };
    for lag in -l..=l {
        let shift = lag.unsigned_abs() as usize;
        if shift >= n || n - shift < MIN_LEN {
            out.omitted_lags.push(lag);
            continue;
        }
        let (xs, ys) = if lag >= 0 {
            (&x[..n - shift], &y[shift..])
        } else {
            (&x[shift..], &y[..n - shift])
        };
        out.lags.push(lag);
        out.r_at_lag.push(stats::pearson(xs, ys));
        out.n_overlap.push(n - shift);
    }
    let mut best: Option<(i64, f64)> = None;
    for (&lag, r) in out.lags.iter().zip(&out.r_at_lag) {
        let Some(r) = *r else { continue };
        best = match best {
            None => Some((lag, r)),
            Some((bl, br)) => {
                let better = r.abs() > br.abs()
                    || (r.abs() == br.abs()
                        && (lag.abs() < bl.abs() || (lag.abs() == bl.abs() && lag < bl)));
                if better {
                    Some((lag, r))
                } else {
                    Some((bl, br))
                }
            }
        };
    }
    out.peak_lag = best.map(|b| b.0);
    out.peak_r = best.map(|b| b.1);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub observable: String,
    pub abs_peak_r: f64,
    pub peak_r: f64,
    pub peak_lag: i64,
    pub n_points: usize,
}

/// Lag-scans every ratio track r_k and the drift speed against the loss,
/// sorted by |peak r| descending. Tracks with fewer than 8 defined points
/// on the loss grid are left out.
pub fn rank_ratios(
    series: &ObservableSeries,
    loss: &MetricSeries,
    max_lag: Option<usize>,
) -> Result<Vec<RankRow>> {
    let mut candidates: Vec<(String, Vec<Option<f64>>)> = series
        .ratio_tracks
        .iter()
        .enumerate()
        .map(|(k, t)| (track_name(k + 1), t.clone()))
        .collect();
    candidates.push((
        "drift_speed".into(),
        series.drift_speed.iter().map(|v| Some(*v)).collect(),
    ));
    let mut rows = Vec::new();
    for (name, track) in candidates {
        let Some(row) = scan_track(&name, &series.steps, &track, loss, max_lag)? else {
            continue;
        };
        rows.push(row);
    }
    rows.sort_by(|a, b| b.abs_peak_r.total_cmp(&a.abs_peak_r));
    Ok(rows)
}

pub fn track_name(k: usize) -> String {
    format!("sigma{k}/sigma{}", k + 1)
}

fn scan_track(
    name: &str,
    steps: &[u64],
    track: &[Option<f64>],
    loss: &MetricSeries,
    max_lag: Option<usize>,
) -> Result<Option<RankRow>> {
    let (s, v): (Vec<u64>, Vec<f64>) = steps
        .iter()
        .zip(track)
        .filter_map(|(s, v)| v.map(|v| (*s, v)))
        .unzip();
    if s.len() < MIN_LEN {
        return Ok(None);
    }
    let obs = MetricSeries::new(name, s, v)?;
    let Ok(joined) = align(&obs, loss) else {
        return Ok(None);
    };
    let x = prepare(&joined.a)?;
    let y = prepare(&joined.b)?;
    let l = max_lag.unwrap_or_else(|| default_max_lag(x.len()));
    let scan = xcorr_lagscan(&x, &y, l)?;
    Ok(match (scan.peak_lag, scan.peak_r) {
        (Some(lag), Some(r)) => Some(RankRow {
            observable: name.to_string(),
            abs_peak_r: r.abs(),
            peak_r: r,
            peak_lag: lag,
            n_points: x.len(),
        }),
        _ => None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlidingCorrelation {
    pub window: usize,
    /// Index of each window's centre in the input.
    pub centers: Vec<usize>,
    /// `None` where either series is constant inside the window.
    pub r: Vec<Option<f64>>,
}

/// Pearson r over every full centred window; edges are truncated.
pub fn sliding_corr(x: &[f64], y: &[f64], window: usize) -> Result<SlidingCorrelation> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "sliding correlation over lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if window < 3 {
        return Err(Error::InvalidArgument(format!("window {window} below 3")));
    }
    if x.len() < window {
        return Err(Error::InsufficientData(format!(
            "{} points cannot fill a window of {window}",
            x.len()
        )));
    }
    let starts = 0..=x.len() - window;
    Ok(SlidingCorrelation {
        window,
        centers: starts.clone().map(|s| s + window / 2).collect(),
        r: starts
            .map(|s| stats::pearson(&x[s..s + window], &y[s..s + window]))
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SegmentMethod {
    /// Plateau = maximal run around the smoothed peak with value ≥ α·peak.
    Peak { alpha: f64 },
    /// Boundaries at persistent sign changes of the smoothed derivative.
    /// Changes smaller than `dead_band_z` noise units count as flat; a new
    /// sign must hold for `persist` consecutive windows.
    Derivative { dead_band_z: f64, persist: usize },
    /// Collapse starts at the first value below `lo` after one above `hi`.
    Threshold { hi: f64, lo: f64 },
}

impl SegmentMethod {
    pub fn peak() -> Self {
        SegmentMethod::Peak { alpha: 0.9 }
    }

    pub fn derivative() -> Self {
        SegmentMethod::Derivative {
            dead_band_z: 1.0,
            persist: 3,
        }
    }

    pub fn threshold() -> Self {
        SegmentMethod::Threshold { hi: 1.4, lo: 1.20 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SegmentMethod::Peak { .. } => "peak",
            SegmentMethod::Derivative { .. } => "derivative",
            SegmentMethod::Threshold { .. } => "threshold",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    /// First window of the phase.
    pub start: usize,
    /// One past the last window.
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSegmentation {
    pub params: SegmentMethod,
    /// Contiguous, non-empty phases covering the series in order.
    pub phases: Vec<Phase>,
    /// Start of the collapse phase, if one was found.
    pub collapse_onset: Option<usize>,
}

impl PhaseSegmentation {
    fn from_bounds(params: SegmentMethod, n: usize, rise_end: usize, onset: Option<usize>) -> Self {
        let collapse = onset.unwrap_or(n);
        let rise_end = rise_end.min(collapse);
        let mut phases = Vec::new();
        for (name, start, end) in [
            ("rise", 0, rise_end),
            ("plateau", rise_end, collapse),
            ("collapse", collapse, n),
        ] {
            if end > start {
                phases.push(Phase {
                    name: name.into(),
                    start,
                    end,
                });
            }
        }
        Self {
            params,
            phases,
            collapse_onset: onset.filter(|&o| o < n),
        }
    }

    pub fn phase(&self, name: &str) -> Option<&Phase> {
        self.phases.iter().find(|p| p.name == name)
    }
}

/// Three-point moving average; the end points average their two-point
/// neighbourhood.
pub fn smooth3(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 2).min(n);
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Splits a raw ratio series into rise, plateau and collapse phases.
pub fn segment_phases(series: &[f64], method: SegmentMethod) -> Result<PhaseSegmentation> {
    let n = series.len();
    if n < 10 {
        return Err(Error::InsufficientData(format!("{n} points, segmentation needs 10")));
    }
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite value at window {i}")));
    }
    Ok(match method {
        SegmentMethod::Peak { alpha } => {
            let s = smooth3(series);
            let mut peak = 0;
            for i in 1..n {
                if s[i] > s[peak] {
                    peak = i;
                }
            }
            let level = alpha * s[peak];
            let mut start = peak;
            while start > 0 && s[start - 1] >= level {
                start -= 1;
            }
            let mut end = peak + 1;
            while end < n && s[end] >= level {
                end += 1;
            }
            PhaseSegmentation::from_bounds(method, n, start, Some(end))
        }
        SegmentMethod::Derivative {
            dead_band_z,
            persist,
        } => {
            let signs = derivative_signs(series, dead_band_z);
            let runs = debounce(&signs, persist.max(1));
            // Collapse: the first falling run after the last rising one.
            let mut onset = None;
            let mut last_rise_end = 0;
            for (idx, &(start, state)) in runs.iter().enumerate() {
                match state {
                    1 => {
                        onset = None;
                        last_rise_end = runs.get(idx + 1).map_or(n, |r| r.0);
                    }
                    -1 if onset.is_none() => onset = Some(start),
                    _ => {}
                }
            }
            PhaseSegmentation::from_bounds(method, n, last_rise_end, onset)
        }
        SegmentMethod::Threshold { hi, lo } => match series.iter().position(|&v| v > hi) {
            None => PhaseSegmentation::from_bounds(method, n, n, None),
            Some(first_hi) => {
                let onset = series[first_hi..]
                    .iter()
                    .position(|&v| v < lo)
                    .map(|k| first_hi + k);
                PhaseSegmentation::from_bounds(method, n, first_hi, onset)
            }
        },
    })
}

/// Ternary sign of the central-difference derivative of the smoothed
/// series. The dead band is `z` times the noise level of that derivative,
/// estimated robustly from the raw first differences.
fn derivative_signs(x: &[f64], z: f64) -> Vec<i8> {
    let n = x.len();
    let s = smooth3(x);
    let d: Vec<f64> = (0..n)
        .map(|i| match i {
            0 => s[1] - s[0],
            _ if i == n - 1 => s[n - 1] - s[n - 2],
            _ => (s[i + 1] - s[i - 1]) / 2.0,
        })
        .collect();
    let diffs: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let med = stats::median(&diffs);
    let mad = stats::median(&diffs.iter().map(|v| (v - med).abs()).collect::<Vec<_>>());
    // Raw noise σ from the MAD of first differences (which carry 2σ²), and
    // the central difference of a 3-point mean carries about σ/3.
    let sigma = mad / 0.674_489_750_196_081_7 / std::f64::consts::SQRT_2;
    let eps = z * sigma / 3.0;
    d.iter()
        .map(|&v| {
            if v > eps {
                1
            } else if v < -eps {
                -1
            } else {
                0
            }
        })
        .collect()
}

/// Accepted state runs as (start, state): the first state is taken as is,
/// later changes only when the new state holds for `persist` samples.
fn debounce(signs: &[i8], persist: usize) -> Vec<(usize, i8)> {
    let mut runs = vec![(0, signs[0])];
    let mut state = signs[0];
    for i in 1..signs.len() {
        if signs[i] != state
            && i + persist <= signs.len()
            && signs[i..i + persist].iter().all(|&s| s == signs[i])
        {
            state = signs[i];
            runs.push((i, state));
        }
    }
    runs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseR {
    pub name: String,
    pub start: usize,
    pub end: usize,
    pub r: Option<f64>,
    /// Phase shorter than 5 points or with a constant side.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCorrelation {
    pub phases: Vec<PhaseR>,
    pub global_r: Option<f64>,
}

/// Pearson r inside each phase, plus the global r for contrast.
pub fn phase_corr(x: &[f64], y: &[f64], seg: &PhaseSegmentation) -> Result<PhaseCorrelation> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "phase correlation over lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let phases = seg
        .phases
        .iter()
        .map(|p| {
            if p.end > x.len() {
                return Err(Error::Dimension(format!(
                    "phase `{}` ends at {} beyond {} points",
                    p.name,
                    p.end,
                    x.len()
                )));
            }
            let r = if p.end - p.start >= 2 {
                stats::pearson(&x[p.start..p.end], &y[p.start..p.end])
            } else {
                None
            };
            Ok(PhaseR {
                name: p.name.clone(),
                start: p.start,
                end: p.end,
                r,
                flagged: p.end - p.start < 5 || r.is_none(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhaseCorrelation {
        phases,
        global_r: stats::pearson(x, y),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrangerResult {
    /// (cause, effect).
    pub direction: (String, String),
    pub n_lags: usize,
    /// Regression rows after dropping the first `n_lags` points.
    pub n_obs: usize,
    pub f: f64,
    pub p: f64,
    pub df_num: usize,
    pub df_den: usize,
    pub delta_r2: f64,
    /// Residualized variant: share of edge variance explained by the loss.
    pub r2_explained: Option<f64>,
    /// Condition number of the unrestricted design exceeded 1e10.
    pub collinear: bool,
    /// The fit could not support a test (for example a constant series).
    pub degenerate: bool,
}

impl GrangerResult {
    pub fn named(mut self, cause: &str, effect: &str) -> Self {
        self.direction = (cause.to_string(), effect.to_string());
        self
    }
}

fn lagged(x: &[f64], lag: usize, first_row: usize) -> Vec<f64> {
    (first_row..x.len()).map(|t| x[t - lag]).collect()
}

/// Joint F test that `causes` (each contributing `lags` lags) improve the
/// prediction of `effect` beyond its own `lags` lags and an intercept.
fn granger_core(causes: &[&[f64]], effect: &[f64], lags: usize) -> Result<GrangerResult> {
    let n = effect.len();
    if lags == 0 {
        return Err(Error::InvalidArgument("Granger test needs at least one lag".into()));
    }
    if let Some(c) = causes.iter().find(|c| c.len() != n) {
        return Err(Error::Dimension(format!(
            "cause of length {} against effect of length {n}",
            c.len()
        )));
    }
    if n <= lags {
        return Err(Error::InsufficientData(format!("{n} points with {lags} lags")));
    }
    let t = n - lags;
    let added = lags * causes.len();
    let p_unres = lags + added + 1;
    if t < p_unres + 8 {
        return Err(Error::InsufficientData(format!(
            "{t} usable rows leave {} residual degrees of freedom, need 8",
            t as i64 - p_unres as i64
        )));
    }
    let y: Vec<f64> = effect[lags..].to_vec();
    let own: Vec<Vec<f64>> = (1..=lags).map(|l| lagged(effect, l, lags)).collect();
    let mut full = own.clone();
    for c in causes {
        for l in 1..=lags {
            full.push(lagged(c, l, lags));
        }
    }
    let restricted = lstsq(&own, &y, true);
    let unrestricted = lstsq(&full, &y, true);
    let my = stats::mean(&y);
    let tss: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let df_den = t - p_unres;
    let collinear = unrestricted.condition > COLLINEAR_CONDITION;
    let numerator = (restricted.rss - unrestricted.rss).max(0.0);
    let degenerate = !(tss > 0.0) || unrestricted.rss <= 1e-12 * tss;
    let (f, p) = if degenerate {
        (0.0, 1.0)
    } else {
        let f = (numerator / added as f64) / (unrestricted.rss / df_den as f64);
        (f, stats::f_sf(f, added as f64, df_den as f64))
    };
    Ok(GrangerResult {
        direction: ("cause".into(), "effect".into()),
        n_lags: lags,
        n_obs: t,
        f,
        p,
        df_num: added,
        df_den,
        delta_r2: if tss > 0.0 {
            (numerator / tss).clamp(0.0, 1.0)
        } else {
            0.0
        },
        r2_explained: None,
        collinear,
        degenerate,
    })
}

/// Bivariate Granger test of `cause` → `effect` with `lags` lags.
pub fn granger(cause: &[f64], effect: &[f64], lags: usize) -> Result<GrangerResult> {
    granger_core(&[cause], effect, lags)
}

/// Regresses the edge series on loss lags 0..=`resid_lags`, then tests
/// whether the residual Granger-causes the loss.
pub fn residualized_granger(
    edge: &[f64],
    loss: &[f64],
    resid_lags: usize,
    granger_lags: usize,
) -> Result<GrangerResult> {
    let n = edge.len();
    if loss.len() != n {
        return Err(Error::Dimension(format!(
            "edge of length {n} against loss of length {}",
            loss.len()
        )));
    }
    if n <= resid_lags + MIN_LEN {
        return Err(Error::InsufficientData(format!("{n} points with {resid_lags} lags")));
    }
    let cols: Vec<Vec<f64>> = (0..=resid_lags).map(|l| lagged(loss, l, resid_lags)).collect();
    let y = &edge[resid_lags..];
    let loss_tail = &loss[resid_lags..];
    let my = stats::mean(y);
    let tss: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let loss_var = stats::variance(loss);
    if !(loss_var > 0.0) || !(tss > 0.0) {
        return Ok(GrangerResult {
            direction: ("edge_residual".into(), "loss".into()),
            n_lags: granger_lags,
            n_obs: y.len().saturating_sub(granger_lags),
            f: 0.0,
            p: 1.0,
            df_num: granger_lags,
            df_den: 0,
            delta_r2: 0.0,
            r2_explained: None,
            collinear: false,
            degenerate: true,
        });
    }
    let fit = lstsq(&cols, y, true);
    let r2 = (1.0 - fit.rss / tss).clamp(0.0, 1.0);
    let mut result = granger(&fit.residuals, loss_tail, granger_lags)?;
    if fit.rss <= 1e-12 * tss {
        // Nothing but rounding error is left to test.
        result.f = 0.0;
        result.p = 1.0;
        result.delta_r2 = 0.0;
        result.degenerate = true;
    }
    result.r2_explained = Some(r2);
    result.collinear |= fit.condition > COLLINEAR_CONDITION;
    Ok(result.named("edge_residual", "loss"))
}

/// Joint Granger test of several observables → `effect`.
pub fn granger_multivariate(
    observables: &[(String, Vec<f64>)],
    effect: &[f64],
    lags: usize,
) -> Result<GrangerResult> {
    if observables.is_empty() {
        return Err(Error::InvalidArgument("no observables given".into()));
    }
    let t = effect.len().saturating_sub(lags);
    let regressors = lags * (observables.len() + 1);
    if regressors * 3 > t {
        return Err(Error::InvalidArgument(format!(
            "{regressors} lagged regressors exceed a third of the {t} usable rows"
        )));
    }
    let causes: Vec<&[f64]> = observables.iter().map(|(_, v)| v.as_slice()).collect();
    let names: Vec<&str> = observables.iter().map(|(n, _)| n.as_str()).collect();
    Ok(granger_core(&causes, effect, lags)?.named(&names.join("+"), "effect"))
}
