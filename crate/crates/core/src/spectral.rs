//! Observables of a window spectrum, the Monte Carlo noise null, rolling
//! series over a dot matrix, and split-half reliability.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::{self, DotMatrix, GramMatrix, Spectrum};
use crate::rng;
use crate::stats;

/// Singular values at or below this fraction of σ₁ count as zero.
pub const EPS_RANK: f64 = 1e-10;

/// Relative rank tolerance actually applied to a W-window. Singular values
/// come from Gram eigenvalues, whose rounding floor is about W·ε·λ₁, so σ
/// cannot be resolved below √(W·ε)·σ₁ and the tolerance never drops under
/// that floor.
pub fn rank_tolerance(w: usize) -> f64 {
    EPS_RANK.max((16.0 * w as f64 * f64::EPSILON).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub window_start: usize,
    pub w: usize,
    pub eigenvalues: Vec<f64>,
    pub singular_values: Vec<f64>,
    /// r_k = σ_k / σ_{k+1} for k = 1..W-1; `None` where σ_{k+1} is
    /// numerically zero.
    pub ratios: Vec<Option<f64>>,
    pub numeric_rank: usize,
    /// 1-based signal rank.
    pub k_star: Option<usize>,
    pub gap_ratio: Option<f64>,
    pub edge_strength: Option<f64>,
    pub k95: usize,
    pub total_variance: f64,
    pub drift_speed: f64,
    /// std/mean of λ_{k*+1..W}; needs at least two noise eigenvalues.
    pub noise_cv: Option<f64>,
    /// σ₁ = 0 or numeric rank below 3.
    pub degenerate: bool,
}

/// Derives the window observables from its spectrum and Gram matrix.
pub fn summarize(spec: &Spectrum, g: &GramMatrix) -> Result<SpectralSummary> {
    let w = spec.eigenvalues.len();
    if w < 3 {
        return Err(Error::InvalidArgument(format!("window {w} is below the minimum of 3")));
    }
    if g.w != w {
        return Err(Error::Dimension(format!(
            "spectrum of order {w} with Gram matrix of order {}",
            g.w
        )));
    }
    let sigma = &spec.singular_values;
    let lambda = &spec.eigenvalues;
    let total_variance: f64 = lambda.iter().sum();
    let drift_speed = g.total_sum().max(0.0).sqrt() / w as f64;
    let k95 = k95(lambda);

    let s1 = sigma[0];
    let cutoff = rank_tolerance(w) * s1;
    let numeric_rank = if s1 > 0.0 {
        sigma.iter().take_while(|&&s| s > cutoff).count()
    } else {
        0
    };
    let ratios: Vec<Option<f64>> = (0..w - 1)
        .map(|k| (s1 > 0.0 && sigma[k + 1] > cutoff).then(|| sigma[k] / sigma[k + 1]))
        .collect();

    let (k_star, gap_ratio) = if numeric_rank == 0 {
        (None, None)
    } else if numeric_rank < w {
        // Tail is numerically zero: the edge sits at the numeric rank and
        // the last finite ratio is what remains to report.
        let last = ratios.iter().rev().find_map(|r| *r);
        (Some(numeric_rank), last)
    } else {
        let mut best = 0;
        for k in 1..w - 1 {
            if ratios[k].unwrap() > ratios[best].unwrap() {
                best = k;
            }
        }
        (Some(best + 1), ratios[best])
    };

    let noise_cv = k_star.and_then(|k| {
        let noise = &lambda[k..];
        if noise.len() < 2 {
            return None;
        }
        let m = stats::mean(noise);
        (m > 0.0).then(|| stats::std_pop(noise) / m)
    });

    Ok(SpectralSummary {
        window_start: spec.window_start,
        w,
        eigenvalues: lambda.clone(),
        singular_values: sigma.clone(),
        ratios,
        numeric_rank,
        k_star,
        gap_ratio,
        edge_strength: gap_ratio.map(|g| g - 1.0),
        k95,
        total_variance,
        drift_speed,
        noise_cv,
        degenerate: s1 == 0.0 || numeric_rank < 3,
    })
}

/// Smallest k whose leading eigenvalues hold at least 95% of the total.
pub fn k95(lambda: &[f64]) -> usize {
    let total: f64 = lambda.iter().sum();
    if !(total > 0.0) {
        return 1;
    }
    let mut acc = 0.0;
    for (k, l) in lambda.iter().enumerate() {
        acc += l;
        if acc >= 0.95 * total {
            return k + 1;
        }
    }
    lambda.len()
}

/// Spectrum and summary of one window of a dot matrix.
pub fn window_summary(d: &DotMatrix, t0: usize, w: usize) -> Result<SpectralSummary> {
    let g = gram::window_gram(d, t0, w)?;
    let spec = gram::eig_sym(&g)?;
    summarize(&spec, &g)
}

/// Monte Carlo null under isotropic Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpNull {
    pub p_eff: usize,
    pub w: usize,
    pub trials: usize,
    pub seed: u64,
    /// (q50, q95, q99) of the largest consecutive ratio.
    pub max_ratio_quantiles: [f64; 3],
    /// Mean over trials of the noise-eigenvalue CV.
    pub cv_null: f64,
    /// 95th percentile of λ_k / Σλ for each rank k.
    pub rank_null_q95: Vec<f64>,
}

impl MpNull {
    /// cv_null extrapolated to ambient dimension `p` along √(W/p).
    pub fn cv_null_at(&self, p: usize) -> f64 {
        self.cv_null * (self.p_eff as f64 / p as f64).sqrt()
    }
}

pub fn mp_null(p_eff: usize, w: usize, trials: usize, seed: u64) -> Result<MpNull> {
    if trials < 100 {
        return Err(Error::InvalidArgument(format!("{trials} trials, need at least 100")));
    }
    if w < 3 || w > gram::MAX_WINDOW {
        return Err(Error::InvalidArgument(format!("window {w} outside [3, {}]", gram::MAX_WINDOW)));
    }
    if p_eff < w {
        return Err(Error::InvalidArgument(format!("p_eff {p_eff} below window {w}")));
    }
    let per_trial: Vec<(f64, Option<f64>, Vec<f64>)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let trial_seed = rng::derive_seed(seed, trial as u64);
            let rows: Vec<Vec<f64>> = (0..w)
                .map(|r| {
                    let mut v = vec![0.0; p_eff];
                    rng::fill_gaussian_row(trial_seed, r as u64, 0, &mut v);
                    v
                })
                .collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let g = GramMatrix::from_vectors(&refs, 0);
            let spec = gram::eig_sym(&g).expect("Gram matrix of Gaussian rows");
            let s = summarize(&spec, &g).expect("window of at least 3");
            let max_ratio = s
                .ratios
                .iter()
                .filter_map(|r| *r)
                .fold(f64::NEG_INFINITY, f64::max);
            let normalized = spec
                .eigenvalues
                .iter()
                .map(|l| l / s.total_variance)
                .collect();
            (max_ratio, s.noise_cv, normalized)
        })
        .collect();

    let maxes: Vec<f64> = per_trial.iter().map(|t| t.0).collect();
    let cvs: Vec<f64> = per_trial.iter().filter_map(|t| t.1).collect();
    let rank_null_q95 = (0..w)
        .map(|k| {
            let col: Vec<f64> = per_trial.iter().map(|t| t.2[k]).collect();
            stats::quantile(&col, 0.95)
        })
        .collect();
    Ok(MpNull {
        p_eff,
        w,
        trials,
        seed,
        max_ratio_quantiles: [
            stats::quantile(&maxes, 0.5),
            stats::quantile(&maxes, 0.95),
            stats::quantile(&maxes, 0.99),
        ],
        cv_null: stats::mean(&cvs),
        rank_null_q95,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BbpRecord {
    pub window_start: usize,
    /// λ_k / Σλ per rank.
    pub normalized: Vec<f64>,
    /// Whether rank k exceeds the null's 95th percentile.
    pub flags: Vec<bool>,
    /// noise_cv / cv_null.
    pub cv_ratio: Option<f64>,
}

pub fn bbp_excess(summary: &SpectralSummary, null: &MpNull) -> Result<BbpRecord> {
    if summary.w != null.w {
        return Err(Error::Dimension(format!(
            "summary window {} against null window {}",
            summary.w, null.w
        )));
    }
    let total = summary.total_variance;
    let normalized: Vec<f64> = summary
        .eigenvalues
        .iter()
        .map(|l| if total > 0.0 { l / total } else { 0.0 })
        .collect();
    let flags = normalized
        .iter()
        .zip(&null.rank_null_q95)
        .map(|(v, q)| v > q)
        .collect();
    Ok(BbpRecord {
        window_start: summary.window_start,
        normalized,
        flags,
        cv_ratio: summary.noise_cv.map(|cv| cv / null.cv_null),
    })
}

/// Per-window observables over a whole trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub w: usize,
    pub t0: Vec<usize>,
    /// Training step of each window's last delta.
    pub steps: Vec<u64>,
    pub gap_ratio: Vec<Option<f64>>,
    pub k_star: Vec<Option<usize>>,
    pub edge_strength: Vec<Option<f64>>,
    pub k95: Vec<usize>,
    pub drift_speed: Vec<f64>,
    pub total_variance: Vec<f64>,
    pub noise_cv: Vec<Option<f64>>,
    /// ratio_tracks[k - 1][t] = r_k at window t.
    pub ratio_tracks: Vec<Vec<Option<f64>>>,
    pub degenerate: Vec<bool>,
}

impl ObservableSeries {
    pub fn len(&self) -> usize {
        self.t0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t0.is_empty()
    }

    /// Undefined entries become NaN.
    pub fn dense(values: &[Option<f64>]) -> Vec<f64> {
        values.iter().map(|v| v.unwrap_or(f64::NAN)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t0,step,gap_ratio,k_star,edge_strength,k95,drift_speed,total_variance");
        for k in 1..self.w {
            let _ = write!(out, ",r_{k}");
        }
        out.push('\n');
        for t in 0..self.len() {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.t0[t],
                self.steps[t],
                cell(self.gap_ratio[t]),
                self.k_star[t].map(|k| k.to_string()).unwrap_or_default(),
                cell(self.edge_strength[t]),
                self.k95[t],
                self.drift_speed[t],
                self.total_variance[t],
            );
            for track in &self.ratio_tracks {
                let _ = write!(out, ",{}", cell(track[t]));
            }
            out.push('\n');
        }
        out
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Summarizes every window of length `w` of `d`.
pub fn rolling_series(d: &DotMatrix, w: usize) -> Result<ObservableSeries> {
    if w < 3 {
        return Err(Error::InvalidArgument(format!("window {w} is below the minimum of 3")));
    }
    if d.n < w + 2 {
        return Err(Error::InsufficientData(format!(
            "{} deltas cannot fill windows of {w} (need at least {})",
            d.n,
            w + 2
        )));
    }
    let summaries = (0..=d.n - w)
        .into_par_iter()
        .map(|t0| window_summary(d, t0, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(d, w, &summaries))
}

fn assemble(d: &DotMatrix, w: usize, summaries: &[SpectralSummary]) -> ObservableSeries {
    ObservableSeries {
        w,
        t0: summaries.iter().map(|s| s.window_start).collect(),
        steps: summaries
            .iter()
            .map(|s| d.step_map[s.window_start + w - 1].1)
            .collect(),
        gap_ratio: summaries.iter().map(|s| s.gap_ratio).collect(),
        k_star: summaries.iter().map(|s| s.k_star).collect(),
        edge_strength: summaries.iter().map(|s| s.edge_strength).collect(),
        k95: summaries.iter().map(|s| s.k95).collect(),
        drift_speed: summaries.iter().map(|s| s.drift_speed).collect(),
        total_variance: summaries.iter().map(|s| s.total_variance).collect(),
        noise_cv: summaries.iter().map(|s| s.noise_cv).collect(),
        ratio_tracks: (0..w - 1)
            .map(|k| summaries.iter().map(|s| s.ratios[k]).collect())
            .collect(),
        degenerate: summaries.iter().map(|s| s.degenerate).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitHalf {
    pub window_start: usize,
    pub w: usize,
    pub k_even: Option<usize>,
    pub k_odd: Option<usize>,
    pub edge_match: bool,
    /// Pearson correlation of the two ratio profiles over ranks where both
    /// are defined.
    pub profile_corr: Option<f64>,
    pub degenerate: bool,
}

/// Compares the spectra of the even- and odd-indexed halves of a window.
pub fn split_half(d: &DotMatrix, t0: usize, w: usize) -> Result<SplitHalf> {
    if w % 2 != 0 || w < 6 {
        return Err(Error::InvalidArgument(format!(
            "split-half needs an even window of at least 6, got {w}"
        )));
    }
    if t0 + w > d.n {
        return Err(Error::WindowRange { start: t0, len: w, n: d.n });
    }
    let half = |parity: usize| -> Result<SpectralSummary> {
        let idx: Vec<usize> = (0..w / 2).map(|i| t0 + 2 * i + parity).collect();
        let mut values = Vec::with_capacity(idx.len() * idx.len());
        for &i in &idx {
            for &j in &idx {
                values.push(d.get(i, j));
            }
        }
        let g = GramMatrix {
            values,
            window_start: t0,
            w: idx.len(),
        };
        summarize(&gram::eig_sym(&g)?, &g)
    };
    let even = half(0)?;
    let odd = half(1)?;
    let (a, b): (Vec<f64>, Vec<f64>) = even
        .ratios
        .iter()
        .zip(&odd.ratios)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .unzip();
    let profile_corr = if a.len() >= 2 { stats::pearson(&a, &b) } else { None };
    Ok(SplitHalf {
        window_start: t0,
        w,
        k_even: even.k_star,
        k_odd: odd.k_star,
        edge_match: even.k_star.is_some() && even.k_star == odd.k_star,
        profile_corr,
        degenerate: profile_corr.is_none() || even.degenerate || odd.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Builds a diagonal Gram matrix with the given singular values.
    fn from_sigma(sigma: &[f64]) -> (Spectrum, GramMatrix) {
        let w = sigma.len();
        let mut values = vec![0.0; w * w];
        for (i, s) in sigma.iter().enumerate() {
            values[i * w + i] = s * s;
        }
        let g = GramMatrix {
            values,
            window_start: 0,
            w,
        };
        (gram::eig_sym(&g).unwrap(), g)
    }

    #[test]
    fn constructed_separation() {
        let (spec, g) = from_sigma(&[10.0, 9.0, 1.0, 0.9]);
        let s = summarize(&spec, &g).unwrap();
        assert_eq!(s.k_star, Some(2));
        assert!((s.gap_ratio.unwrap() - 9.0).abs() < 1e-12);
        assert!((s.edge_strength.unwrap() - 8.0).abs() < 1e-12);
        assert!((s.ratios[0].unwrap() - 10.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_toward_smallest_k() {
        let (spec, g) = from_sigma(&[4.0, 2.0, 1.0, 0.5]);
        let s = summarize(&spec, &g).unwrap();
        assert_eq!(s.k_star, Some(1));
        assert_eq!(s.gap_ratio, Some(2.0));
    }

    #[test]
    fn constant_drift_identity() {
        let v = [3.0, -1.0, 2.0];
        let rows = vec![&v[..]; 5];
        let g = GramMatrix::from_vectors(&rows, 0);
        let spec = gram::eig_sym(&g).unwrap();
        let s = summarize(&spec, &g).unwrap();
        let norm = (14.0f64).sqrt();
        assert!((s.drift_speed - norm).abs() < 1e-12);
        assert!((s.eigenvalues[0] - 5.0 * 14.0).abs() < 1e-10);
        assert_eq!(s.numeric_rank, 1);
        assert_eq!(s.k_star, Some(1));
        assert!(s.degenerate);
        assert_eq!(s.k95, 1);
    }

    #[test]
    fn zero_window_is_degenerate() {
        let (spec, g) = from_sigma(&[0.0, 0.0, 0.0]);
        let s = summarize(&spec, &g).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.k_star, None);
        assert!(s.ratios.iter().all(|r| r.is_none()));
    }

    #[test]
    fn tail_zero_reports_last_finite_ratio() {
        let (spec, g) = from_sigma(&[8.0, 4.0, 1.0, 0.0, 0.0]);
        let s = summarize(&spec, &g).unwrap();
        assert_eq!(s.numeric_rank, 3);
        assert_eq!(s.k_star, Some(3));
        assert_eq!(s.gap_ratio, Some(4.0));
        assert_eq!(s.ratios[3], None);
        assert!(!s.degenerate);
    }

    #[test]
    fn window_below_three_is_rejected() {
        let (spec, g) = from_sigma(&[2.0, 1.0]);
        assert!(summarize(&spec, &g).is_err());
    }

    #[test]
    fn k95_examples() {
        assert_eq!(k95(&[95.0, 5.0]), 1);
        assert_eq!(k95(&[50.0, 40.0, 6.0, 4.0]), 3);
        assert_eq!(k95(&[1.0; 10]), 10);
    }

    #[test]
    fn split_half_rejects_odd_window() {
        let d = DotMatrix {
            n: 8,
            values: (0..64).map(|k| if k % 9 == 0 { 1.0 } else { 0.0 }).collect(),
            source: gram::DotSource::Full,
            step_map: (0..8).map(|i| (i, i + 1)).collect(),
        };
        assert!(split_half(&d, 0, 7).is_err());
        assert!(split_half(&d, 0, 4).is_err());
        assert!(split_half(&d, 0, 8).is_ok());
    }
}
