//! Small statistics toolkit: moments, Pearson correlation, quantiles, the
//! F distribution tail and ordinary least squares.

use nalgebra::{DMatrix, DVector};

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance (denominator n - 1).
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Sample standard deviation (denominator n - 1).
pub fn std_dev(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

/// Population standard deviation (denominator n).
pub fn std_pop(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Pearson correlation; `None` when either side has zero variance or the
/// inputs are shorter than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson length mismatch");
    if x.len() < 2 {
        return None;
    }
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    // Relative guard: a series that is constant up to rounding has no
    // meaningful correlation.
    let scale_x = x.iter().map(|v| v * v).sum::<f64>();
    let scale_y = y.iter().map(|v| v * v).sum::<f64>();
    if sxx <= 1e-24 * scale_x.max(f64::MIN_POSITIVE) || sxx == 0.0 {
        return None;
    }
    if syy <= 1e-24 * scale_y.max(f64::MIN_POSITIVE) || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Standardizes to zero mean and unit sample standard deviation. A constant
/// input maps to all zeros.
pub fn zscore(x: &[f64]) -> Vec<f64> {
    let m = mean(x);
    let s = std_dev(x);
    if !(s > 0.0) || !s.is_finite() {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - m) / s).collect()
}

/// Quantile with linear interpolation between order statistics
/// (the "type 7" definition).
pub fn quantile(x: &[f64], q: f64) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(x: &[f64]) -> f64 {
    quantile(x, 0.5)
}

/// Natural log of the gamma function (Lanczos, g = 7, n = 9), valid for
/// x > 0 with relative error around 1e-15.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta function I_x(a, b).
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The continued fraction converges quickly for x < (a + 1) / (a + b + 2);
    // otherwise use the symmetry I_x(a, b) = 1 - I_{1-x}(b, a).
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Modified Lentz evaluation of the incomplete beta continued fraction.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Upper tail P(F > f) of the F distribution with (d1, d2) degrees of freedom.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if !(f > 0.0) {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    beta_inc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

/// Welch's two-sample t statistic (mean(b) - mean(a)); `None` when either
/// side has zero variance or fewer than two points.
pub fn welch_t(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (va, vb) = (variance(a), variance(b));
    if !(va > 0.0) || !(vb > 0.0) {
        return None;
    }
    let se = (va / a.len() as f64 + vb / b.len() as f64).sqrt();
    Some((mean(b) - mean(a)) / se)
}

/// Ordinary least-squares fit.
#[derive(Clone, Debug)]
pub struct LstsqFit {
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub rss: f64,
    /// Ratio of largest to smallest singular value of the design matrix.
    pub condition: f64,
}

/// Least squares via SVD of the design matrix. `columns` are regressors
/// (each of length `y.len()`); an intercept is added when `intercept` is set.
pub fn lstsq(columns: &[Vec<f64>], y: &[f64], intercept: bool) -> LstsqFit {
    let n = y.len();
    let k = columns.len() + usize::from(intercept);
    let x = DMatrix::from_fn(n, k, |i, j| {
        if intercept {
            if j == 0 {
                1.0
            } else {
                columns[j - 1][i]
            }
        } else {
            columns[j][i]
        }
    });
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let yv = DVector::from_column_slice(y);
    let beta = svd
        .solve(&yv, smax * f64::EPSILON * n.max(k) as f64)
        .unwrap_or_else(|_| DVector::zeros(k));
    let fitted = &x * &beta;
    let residuals: Vec<f64> = yv.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    let rss = residuals.iter().map(|r| r * r).sum();
    LstsqFit {
        coefficients: beta.iter().copied().collect(),
        fitted: fitted.iter().copied().collect(),
        residuals,
        rss,
        condition,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_matches_factorials() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
        assert!((ln_gamma(100.5) - 361.435_540_467_777_6).abs() < 1e-10);
    }

    #[test]
    fn f_tail_matches_reference_values() {
        // scipy.stats.f.sf reference values.
        let cases = [
            (1.0, 1.0, 10.0, 0.340_893_132_302_059_75),
            (4.0, 1.0, 56.0, 0.050_359_214_488_242_83),
            (54.4, 1.0, 56.0, 8.285_512_363_688_849e-10),
            (2.5, 3.0, 40.0, 0.073_254_352_017_949_78),
            (0.2, 10.0, 10.0, 0.991_049_938_398_618_1),
            (7.0, 2.0, 8.0, 0.017_485_144_457_345_81),
        ];
        for (f, d1, d2, want) in cases {
            let got = f_sf(f, d1, d2);
            assert!(
                (got / want - 1.0).abs() < 1e-9,
                "F({f}; {d1}, {d2}) = {got}, want {want}"
            );
        }
        assert_eq!(f_sf(0.0, 1.0, 10.0), 1.0);
    }

    #[test]
    fn beta_inc_symmetry() {
        for &(a, b, x) in &[(2.0, 3.0, 0.3), (0.5, 7.5, 0.9), (30.0, 1.5, 0.95)] {
            let lhs = beta_inc(a, b, x);
            let rhs = 1.0 - beta_inc(b, a, 1.0 - x);
            assert!((lhs - rhs).abs() < 1e-12, "{a} {b} {x}");
        }
    }

    #[test]
    fn pearson_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[8.0, 6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&x, &[1.0; 4]).is_none());
    }

    #[test]
    fn pearson_is_affine_invariant() {
        let x: Vec<f64> = (0..40).map(|i| ((i * 7919) % 101) as f64 / 13.0).collect();
        let y: Vec<f64> = (0..40).map(|i| ((i * 104_729) % 97) as f64 / 7.0).collect();
        let y2: Vec<f64> = y.iter().map(|v| 3.0 * v + 7.0).collect();
        let r1 = pearson(&x, &y).unwrap();
        let r2 = pearson(&x, &y2).unwrap();
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn quantile_interpolates() {
        let x = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&x, 0.0), 1.0);
        assert_eq!(quantile(&x, 1.0), 4.0);
        assert_eq!(quantile(&x, 0.5), 2.5);
    }

    #[test]
    fn lstsq_recovers_exact_line() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = xs.iter().map(|x| 2.0 + 0.5 * x).collect();
        let fit = lstsq(&[xs], &y, true);
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 0.5).abs() < 1e-12);
        assert!(fit.rss < 1e-20);
    }

    #[test]
    fn lstsq_reports_collinearity() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let fit = lstsq(&[a.clone(), a], &y, true);
        assert!(fit.condition > 1e10);
    }
}
