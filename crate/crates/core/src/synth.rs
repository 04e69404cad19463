//! Synthetic spiked trajectories with known ground truth, coupled loss
//! series, and an independent dense spectrum oracle.
//!
//! A trajectory is `δ_t = Σ_k A_k(t) m_k(t) τ√p u_k + ξ_t`: `u_k` are
//! seeded orthonormal directions, `A_k` an amplitude schedule in units of
//! τ√p, `m_k(t) = ±1` a temporal sign pattern that keeps the spikes'
//! window profiles (nearly) orthogonal, and `ξ_t` isotropic or power-law
//! anisotropic noise. Every value is a pure function of the seed and its
//! coordinate, so trajectories of any dimension are generated in streamed
//! coordinate chunks.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats;
use crate::store::{FilterRecord, Store, StoreWriter};
use crate::sum::PairwiseSum;
use crate::timeseries::{detrend_cubic, MetricSeries};

/// Coordinates generated per chunk when streaming to a store.
const GEN_CHUNK: usize = 1 << 15;

/// Amplitude over delta index t of an N-delta trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant { value: f64 },
    /// Linear from `from` at t = 0 to `to` at t = N - 1.
    Ramp { from: f64, to: f64 },
    /// `base` until `rise_start`, linear up to `peak` at `rise_end`, flat
    /// until `fall_start`, linear down to `base` at `fall_end`.
    Trapezoid {
        base: f64,
        peak: f64,
        rise_start: usize,
        rise_end: usize,
        fall_start: usize,
        fall_end: usize,
    },
    /// `before` for t < `at`, `after` from `at` on.
    Step { before: f64, after: f64, at: usize },
    Custom { values: Vec<f64> },
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Schedule::Constant { value }
    }

    pub fn value(&self, t: usize, n: usize) -> f64 {
        match self {
            Schedule::Constant { value } => *value,
            Schedule::Ramp { from, to } => {
                if n <= 1 {
                    *from
                } else {
                    from + (to - from) * t as f64 / (n - 1) as f64
                }
            }
            Schedule::Trapezoid {
                base,
                peak,
                rise_start,
                rise_end,
                fall_start,
                fall_end,
            } => {
                let lerp = |a: usize, b: usize, from: f64, to: f64| {
                    if b <= a {
                        to
                    } else {
                        from + (to - from) * (t - a) as f64 / (b - a) as f64
                    }
                };
                if t < *rise_start {
                    *base
                } else if t < *rise_end {
                    lerp(*rise_start, *rise_end, *base, *peak)
                } else if t < *fall_start {
                    *peak
                } else if t < *fall_end {
                    lerp(*fall_start, *fall_end, *peak, *base)
                } else {
                    *base
                }
            }
            Schedule::Step { before, after, at } => {
                if t < *at {
                    *before
                } else {
                    *after
                }
            }
            Schedule::Custom { values } => values.get(t).copied().unwrap_or(0.0),
        }
    }

    fn step_index(&self) -> Option<usize> {
        match self {
            Schedule::Step { before, after, at } if before != after => Some(*at),
            _ => None,
        }
    }
}

/// Sign pattern m(t) applied to a spike.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    /// +1 always: a steady drift direction.
    Constant,
    /// (-1)^t.
    Alternating,
    /// (-1)^⌊t/2⌋.
    Square,
    /// Independent seeded ±1 per delta.
    RandomSigns,
}

impl Modulation {
    /// Default pattern for spike k: constant, alternating, square, then
    /// random signs.
    pub fn for_spike(k: usize) -> Self {
        match k {
            0 => Modulation::Constant,
            1 => Modulation::Alternating,
            2 => Modulation::Square,
            _ => Modulation::RandomSigns,
        }
    }

    fn sign(&self, t: usize, key: u64) -> f64 {
        let odd = match self {
            Modulation::Constant => false,
            Modulation::Alternating => t % 2 == 1,
            Modulation::Square => (t / 2) % 2 == 1,
            Modulation::RandomSigns => rng::uniform_open(key, t as u64) < 0.5,
        };
        if odd {
            -1.0
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    /// Amplitude in units of τ√p; must be non-negative.
    pub amplitude: Schedule,
    /// Defaults to [`Modulation::for_spike`].
    #[serde(default)]
    pub modulation: Option<Modulation>,
}

impl Spike {
    pub fn constant(amplitude: f64) -> Self {
        Self {
            amplitude: Schedule::constant(amplitude),
            modulation: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Noise {
    /// i.i.d. N(0, τ²) per coordinate.
    Isotropic,
    /// Variance λ_m ∝ m^(-exponent), m = 1..=cutoff, along `cutoff` random
    /// directions, scaled so the total variance per delta is τ²p.
    Anisotropic { exponent: f64, cutoff: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikePlan {
    pub spikes: Vec<Spike>,
    pub tau: f64,
    pub noise: Noise,
    /// Multiplier on the noise of delta t (a distribution shift when it
    /// steps). Defaults to 1.
    #[serde(default)]
    pub noise_scale: Option<Schedule>,
    /// Analysis window the plan is meant for; the spike count must stay
    /// below it.
    pub window: usize,
}

impl SpikePlan {
    pub fn isotropic(spikes: Vec<Spike>, window: usize) -> Self {
        Self {
            spikes,
            tau: 1.0,
            noise: Noise::Isotropic,
            noise_scale: None,
            window,
        }
    }

    fn validate(&self, n: usize, p: usize) -> Result<()> {
        let k = self.spikes.len();
        if k >= self.window {
            return Err(Error::InvalidArgument(format!(
                "{k} spikes cannot sit below a window of {}",
                self.window
            )));
        }
        if p < 8 * k.max(1) {
            return Err(Error::InvalidArgument(format!("p = {p} is below 8k = {}", 8 * k)));
        }
        if n < self.window {
            return Err(Error::InvalidArgument(format!(
                "{n} deltas cannot fill a window of {}",
                self.window
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("noise scale tau must be positive".into()));
        }
        for (i, s) in self.spikes.iter().enumerate() {
            if (0..n).any(|t| !(s.amplitude.value(t, n) >= 0.0)) {
                return Err(Error::InvalidArgument(format!("spike {i} has a negative amplitude")));
            }
        }
        if let Noise::Anisotropic { cutoff, exponent } = self.noise {
            if cutoff == 0 || !exponent.is_finite() {
                return Err(Error::InvalidArgument("anisotropic noise needs cutoff >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Known structure of a generated trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    pub window: usize,
    /// amplitudes[k][t], in units of τ√p.
    pub amplitudes: Vec<Vec<f64>>,
    pub modulations: Vec<Modulation>,
    pub noise_scale: Vec<f64>,
    /// Spikes with non-zero amplitude somewhere in each window.
    pub planted_k: Vec<usize>,
    /// First delta after a step change in the plan, if any.
    pub shift_index: Option<usize>,
    /// Planted coupling lag and sign of a derived loss series.
    pub coupling: Option<(i64, f64)>,
}

/// Seeded orthonormal directions `U = L⁻¹ Z`, where the rows of `Z` are
/// counter-generated Gaussians and `L` is the Cholesky factor of `Z Zᵀ`.
struct Directions {
    seed: u64,
    /// Row-major k×k inverse Cholesky factor.
    linv: Vec<f64>,
    k: usize,
}

impl Directions {
    fn new(seed: u64, k: usize, p: usize) -> Result<Self> {
        if k == 0 {
            return Ok(Self {
                seed,
                linv: Vec::new(),
                k,
            });
        }
        let c = Self::gram(seed, k, p, None);
        let chol = DMatrix::from_row_slice(k, k, &c)
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("random directions are degenerate".into()))?;
        let linv = chol
            .l()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("random directions are degenerate".into()))?;
        let mut linv_rows = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                linv_rows[i * k + j] = linv[(i, j)];
            }
        }
        let dirs = Self {
            seed,
            linv: linv_rows,
            k,
        };
        let check = Self::gram(seed, k, p, Some(&dirs.linv));
        let worst = (0..k * k)
            .map(|idx| {
                let target = if idx / k == idx % k { 1.0 } else { 0.0 };
                (check[idx] - target).abs()
            })
            .fold(0.0f64, f64::max);
        if worst > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "planted directions deviate from orthonormality by {worst:e}"
            )));
        }
        Ok(dirs)
    }

    /// Gram matrix of Z (or of L⁻¹Z when `linv` is given), streamed.
    fn gram(seed: u64, k: usize, p: usize, linv: Option<&[f64]>) -> Vec<f64> {
        let mut acc = vec![PairwiseSum::new(); k * k];
        let mut rows = vec![Vec::new(); k];
        let mut start = 0;
        while start < p {
            let len = GEN_CHUNK.min(p - start);
            Self::fill_raw(seed, k, start, len, &mut rows);
            if let Some(l) = linv {
                rows = Self::transform(l, k, &rows);
            }
            for i in 0..k {
                for j in 0..k {
                    acc[i * k + j].add_products(&rows[i], &rows[j]);
                }
            }
            start += len;
        }
        acc.iter().map(|a| a.total()).collect()
    }

    fn fill_raw(seed: u64, k: usize, start: usize, len: usize, rows: &mut [Vec<f64>]) {
        for (r, row) in rows.iter_mut().enumerate().take(k) {
            row.resize(len, 0.0);
            rng::fill_gaussian_row(seed, r as u64, start as u64, row);
        }
    }

    fn transform(linv: &[f64], k: usize, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let len = z.first().map_or(0, |r| r.len());
        (0..k)
            .map(|i| {
                let mut out = vec![0.0; len];
                for j in 0..=i {
                    let c = linv[i * k + j];
                    for (o, v) in out.iter_mut().zip(&z[j]) {
                        *o += c * v;
                    }
                }
                out
            })
            .collect()
    }

    /// Orthonormal direction rows over coordinates `start..start + len`.
    fn chunk(&self, start: usize, len: usize) -> Vec<Vec<f64>> {
        let mut z = vec![Vec::new(); self.k];
        Self::fill_raw(self.seed, self.k, start, len, &mut z);
        Self::transform(&self.linv, self.k, &z)
    }
}

/// A planned trajectory, ready to be generated in coordinate chunks.
pub struct Trajectory {
    plan: SpikePlan,
    n: usize,
    p: usize,
    seed: u64,
    directions: Directions,
    /// coefficient[t][k] = A_k(t) m_k(t) τ√p.
    coefficients: Vec<Vec<f64>>,
    noise_scale: Vec<f64>,
    /// Anisotropic mode: noise weights[t][m] = √λ_m z_{t,m} × scale(t).
    aniso_weights: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn new(plan: &SpikePlan, n: usize, p: usize, seed: u64) -> Result<Self> {
        plan.validate(n, p)?;
        let k = plan.spikes.len();
        let directions = Directions::new(rng::derive_seed(seed, 1), k, p)?;
        let unit = plan.tau * (p as f64).sqrt();
        let coefficients = (0..n)
            .map(|t| {
                plan.spikes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let m = s.modulation.unwrap_or(Modulation::for_spike(i));
                        let key = rng::row_key(rng::derive_seed(seed, 5), i as u64);
                        s.amplitude.value(t, n) * m.sign(t, key) * unit
                    })
                    .collect()
            })
            .collect();
        let noise_scale: Vec<f64> = (0..n)
            .map(|t| plan.noise_scale.as_ref().map_or(1.0, |s| s.value(t, n)))
            .collect();
        let aniso_weights = match plan.noise {
            Noise::Isotropic => None,
            Noise::Anisotropic { exponent, cutoff } => {
                let raw: Vec<f64> = (1..=cutoff).map(|m| (m as f64).powf(-exponent)).collect();
                let total: f64 = raw.iter().sum();
                let lambda: Vec<f64> = raw
                    .iter()
                    .map(|l| l / total * plan.tau * plan.tau * p as f64)
                    .collect();
                let coef_seed = rng::derive_seed(seed, 4);
                Some(
                    (0..n)
                        .map(|t| {
                            let key = rng::row_key(coef_seed, t as u64);
                            lambda
                                .iter()
                                .enumerate()
                                .map(|(m, l)| l.sqrt() * rng::normal_at(key, m as u64) * noise_scale[t])
                                .collect()
                        })
                        .collect(),
                )
            }
        };
        Ok(Self {
            plan: plan.clone(),
            n,
            p,
            seed,
            directions,
            coefficients,
            noise_scale,
            aniso_weights,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Fills `out[t]` with delta t over coordinates `start..start + len`.
    pub fn fill(&self, start: usize, len: usize, out: &mut [Vec<f64>]) {
        assert_eq!(out.len(), self.n);
        let u = self.directions.chunk(start, len);
        let basis = self.aniso_weights.as_ref().map(|w| {
            let m = w[0].len();
            let seed = rng::derive_seed(self.seed, 3);
            let scale = 1.0 / (self.p as f64).sqrt();
            (0..m)
                .into_par_iter()
                .map(|r| {
                    let mut row = vec![0.0; len];
                    rng::fill_gaussian_row(seed, r as u64, start as u64, &mut row);
                    row.iter_mut().for_each(|v| *v *= scale);
                    row
                })
                .collect::<Vec<_>>()
        });
        let noise_seed = rng::derive_seed(self.seed, 2);
        out.par_iter_mut().enumerate().for_each(|(t, dst)| {
            dst.clear();
            dst.resize(len, 0.0);
            match (&basis, &self.aniso_weights) {
                (Some(basis), Some(weights)) => {
                    for (w, row) in weights[t].iter().zip(basis) {
                        for (d, v) in dst.iter_mut().zip(row) {
                            *d += w * v;
                        }
                    }
                }
                _ => {
                    let key = rng::row_key(noise_seed, t as u64);
                    let s = self.plan.tau * self.noise_scale[t];
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = s * rng::normal_at(key, (start + i) as u64);
                    }
                }
            }
            for (c, row) in self.coefficients[t].iter().zip(&u) {
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += c * v;
                }
            }
        });
    }

    /// All deltas in memory.
    pub fn deltas(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.n];
        let mut chunk = vec![Vec::new(); self.n];
        let mut start = 0;
        while start < self.p {
            let len = GEN_CHUNK.min(self.p - start);
            self.fill(start, len, &mut chunk);
            for (o, c) in out.iter_mut().zip(&chunk) {
                o.extend_from_slice(c);
            }
            start += len;
        }
        out
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let n = self.n;
        let w = self.plan.window;
        let amplitudes: Vec<Vec<f64>> = self
            .plan
            .spikes
            .iter()
            .map(|s| (0..n).map(|t| s.amplitude.value(t, n)).collect())
            .collect();
        let planted_k = (0..=n - w)
            .map(|t0| {
                amplitudes
                    .iter()
                    .filter(|a| a[t0..t0 + w].iter().any(|&v| v > 0.0))
                    .count()
            })
            .collect();
        let shift_index = self
            .plan
            .noise_scale
            .iter()
            .chain(self.plan.spikes.iter().map(|s| &s.amplitude))
            .filter_map(|s| s.step_index())
            .min();
        GroundTruth {
            n,
            p: self.p,
            seed: self.seed,
            window: w,
            amplitudes,
            modulations: self
                .plan
                .spikes
                .iter()
                .enumerate()
                .map(|(i, s)| s.modulation.unwrap_or(Modulation::for_spike(i)))
                .collect(),
            noise_scale: self.noise_scale.clone(),
            planted_k,
            shift_index,
            coupling: None,
        }
    }

    /// Writes the trajectory as a checkpoint store: θ₀ = 0 and
    /// θ_{t+1} = θ_t + δ_t, accumulated in f64 and stored as f32, at steps
    /// `first_step + t·stride`. `keys` lists (name, length) pairs summing
    /// to p; by default a single key `theta`.
    pub fn write_store(
        &self,
        dir: &Path,
        first_step: u64,
        stride: u64,
        keys: Option<&[(String, u64)]>,
    ) -> Result<Store> {
        let default_keys = [("theta".to_string(), self.p as u64)];
        let keys = keys.unwrap_or(&default_keys);
        if keys.iter().map(|k| k.1).sum::<u64>() != self.p as u64 {
            return Err(Error::Dimension("key lengths do not sum to p".into()));
        }
        let mut writer = StoreWriter::create(dir, keys, FilterRecord::default())?;
        let steps: Vec<u64> = (0..=self.n as u64).map(|t| first_step + t * stride).collect();
        let mut blobs = steps
            .iter()
            .map(|&s| writer.open_blob(s))
            .collect::<Result<Vec<_>>>()?;
        let mut chunk = vec![Vec::new(); self.n];
        let mut theta = Vec::new();
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.p {
            let len = GEN_CHUNK.min(self.p - start);
            self.fill(start, len, &mut chunk);
            theta.clear();
            theta.resize(len, 0.0f64);
            out.clear();
            out.resize(len, 0.0f32);
            blobs[0].write(&out)?;
            for (t, delta) in chunk.iter().enumerate() {
                for ((th, d), o) in theta.iter_mut().zip(delta).zip(out.iter_mut()) {
                    *th += d;
                    *o = *th as f32;
                }
                blobs[t + 1].write(&out)?;
            }
            start += len;
        }
        for blob in blobs {
            writer.push_step(blob.finish()?)?;
        }
        writer.finish()
    }
}

/// Generates a trajectory in memory with its ground truth.
pub fn gen_trajectory(
    plan: &SpikePlan,
    n: usize,
    p: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, GroundTruth)> {
    let traj = Trajectory::new(plan, n, p, seed)?;
    Ok((traj.deltas(), traj.ground_truth()))
}

/// Loss driven by a gap series: `loss_t = sign·gap_{t−lag} + trend_t + ε_t`,
/// on the steps where `t − lag` exists. The cubic trend and the noise
/// (`noise_std`) are both in units of the standard deviation of the
/// cubic-detrended gap.
pub fn gen_coupled_loss(
    gap: &MetricSeries,
    lag: i64,
    sign: f64,
    noise_std: f64,
    seed: u64,
) -> Result<(MetricSeries, (i64, f64))> {
    let n = gap.values.len();
    if lag.unsigned_abs() as usize > n / 4 {
        return Err(Error::InvalidArgument(format!(
            "lag {lag} exceeds a quarter of {n} points"
        )));
    }
    // The lag scan sees the detrended gap, so its spread sets the units.
    let scale = stats::std_dev(&detrend_cubic(&gap.values)?);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let key = rng::row_key(seed, 0);
    let half = (n - 1) as f64 / 2.0;
    let mut steps = Vec::new();
    let mut values = Vec::new();
    for t in 0..n {
        let src = t as i64 - lag;
        if src < 0 || src >= n as i64 {
            continue;
        }
        let u = (t as f64 - half) / half;
        let trend = scale * (3.0 - 2.0 * u + u * u - 1.5 * u * u * u);
        let noise = noise_std * scale * rng::normal_at(key, t as u64);
        steps.push(gap.steps[t]);
        values.push(sign * gap.values[src as usize] + trend + noise);
    }
    Ok((MetricSeries::new("loss", steps, values)?, (lag, sign)))
}

/// Singular values of the W×p window `deltas[t0..t0+W]` by one-sided
/// Jacobi rotations on the rows (no Gram matrix is formed). Descending.
pub fn oracle_spectrum(deltas: &[Vec<f64>], t0: usize, w: usize) -> Result<Vec<f64>> {
    if t0 + w > deltas.len() {
        return Err(Error::WindowRange {
            start: t0,
            len: w,
            n: deltas.len(),
        });
    }
    let p = deltas[t0].len();
    if p > 2000 {
        return Err(Error::InvalidArgument(format!("oracle limited to p <= 2000, got {p}")));
    }
    let mut rows: Vec<Vec<f64>> = deltas[t0..t0 + w].to_vec();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..w {
            for j in i + 1..w {
                let alpha = dot(&rows[i], &rows[i]);
                let beta = dot(&rows[j], &rows[j]);
                let gamma = dot(&rows[i], &rows[j]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (ri, rj) = if i < j {
                    let (a, b) = rows.split_at_mut(j);
                    (&mut a[i], &mut b[0])
                } else {
                    unreachable!()
                };
                for (x, y) in ri.iter_mut().zip(rj.iter_mut()) {
                    let (xi, yj) = (*x, *y);
                    *x = c * xi - s * yj;
                    *y = s * xi + c * yj;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = rows.iter().map(|r| dot(r, r).sqrt()).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_schedule_shape() {
        let s = Schedule::Trapezoid {
            base: 0.0,
            peak: 2.0,
            rise_start: 2,
            rise_end: 6,
            fall_start: 10,
            fall_end: 14,
        };
        let v: Vec<f64> = (0..16).map(|t| s.value(t, 16)).collect();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[4], 1.0);
        assert_eq!(v[6], 2.0);
        assert_eq!(v[9], 2.0);
        assert_eq!(v[12], 1.0);
        assert_eq!(v[15], 0.0);
    }

    #[test]
    fn identical_seed_gives_identical_trajectory() {
        let plan = SpikePlan::isotropic(vec![Spike::constant(3.0), Spike::constant(1.5)], 10);
        let (a, _) = gen_trajectory(&plan, 12, 500, 7).unwrap();
        let (b, _) = gen_trajectory(&plan, 12, 500, 7).unwrap();
        let (c, _) = gen_trajectory(&plan, 12, 500, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn too_many_spikes_for_the_window() {
        let plan = SpikePlan::isotropic(vec![Spike::constant(1.0); 3], 3);
        assert!(Trajectory::new(&plan, 10, 100, 0).is_err());
    }

    #[test]
    fn directions_are_orthonormal() {
        let d = Directions::new(11, 4, 3000).unwrap();
        let u = d.chunk(0, 3000);
        for i in 0..4 {
            for j in 0..4 {
                let v: f64 = u[i].iter().zip(&u[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn chunked_generation_matches_whole() {
        let plan = SpikePlan {
            spikes: vec![Spike::constant(2.0)],
            tau: 0.5,
            noise: Noise::Anisotropic {
                exponent: 1.0,
                cutoff: 20,
            },
            noise_scale: None,
            window: 5,
        };
        let traj = Trajectory::new(&plan, 6, 100, 3).unwrap();
        let whole = traj.deltas();
        let mut part = vec![Vec::new(); 6];
        traj.fill(40, 25, &mut part);
        for t in 0..6 {
            assert_eq!(&whole[t][40..65], &part[t][..]);
        }
    }

    #[test]
    fn oracle_on_rank_one_rows() {
        let v: Vec<f64> = (0..50).map(|i| (i as f64 * 0.1).cos()).collect();
        let rows: Vec<Vec<f64>> = (1..=4).map(|s| v.iter().map(|x| x * s as f64).collect()).collect();
        let sigma = oracle_spectrum(&rows, 0, 4).unwrap();
        let fro: f64 = rows.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        assert!((sigma[0] - fro).abs() < 1e-10 * fro);
        assert!(sigma[1..].iter().all(|s| *s < 1e-7 * fro));
    }

    #[test]
    fn coupled_loss_drops_points_outside_the_lag() {
        let gap = MetricSeries::new(
            "gap",
            (0..40).map(|i| i * 200).collect(),
            (0..40).map(|i| (i as f64 * 0.7).sin()).collect(),
        )
        .unwrap();
        let (loss, truth) = gen_coupled_loss(&gap, 2, -1.0, 0.0, 1).unwrap();
        assert_eq!(loss.values.len(), 38);
        assert_eq!(loss.steps[0], 400);
        assert_eq!(truth, (2, -1.0));
        assert!(gen_coupled_loss(&gap, 11, 1.0, 0.0, 1).is_err());
    }
}
