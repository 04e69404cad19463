//! Pairwise delta dot products, window Gram matrices and their spectra.
//!
//! The N×N matrix `D[i][j] = <δ_i, δ_j>` is the only pass over the
//! p-dimensional data. Every window Gram matrix is a principal submatrix of
//! it, so sweeping window sizes costs no further inner products.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::{KeySpan, Store};
use crate::sum::PairwiseSum;

/// Largest window the Jacobi solver accepts.
pub const MAX_WINDOW: usize = 64;

/// Coordinates per cache tile during streaming accumulation.
const TILE: usize = 4096;

/// Coordinates read per blob per step of a streaming pass.
pub const STREAM_CHUNK: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DotSource {
    Full,
    Sketched { fingerprint: String },
    Group { name: String },
}

impl DotSource {
    /// File tag used in `dots_<tag>.json` / `dots_<tag>.bin`.
    pub fn tag(&self) -> String {
        match self {
            DotSource::Full => "full".into(),
            DotSource::Sketched { .. } => "sketched".into(),
            DotSource::Group { name } => format!("group-{name}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DotMatrix {
    pub n: usize,
    /// Row-major N×N values.
    pub values: Vec<f64>,
    pub source: DotSource,
    /// (from_step, to_step) for each delta index.
    pub step_map: Vec<(u64, u64)>,
}

impl DotMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// Checks symmetry (1e-9 relative to the largest entry) and a
    /// non-negative diagonal.
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.n * self.n || self.step_map.len() != self.n {
            return Err(Error::Dimension(format!(
                "dot matrix of order {} has {} values and {} step entries",
                self.n,
                self.values.len(),
                self.step_map.len()
            )));
        }
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let asym = max_asymmetry(&self.values, self.n);
        if asym > 1e-9 * scale {
            return Err(Error::NotSymmetric(asym / scale.max(f64::MIN_POSITIVE)));
        }
        if let Some(i) = (0..self.n).find(|&i| self.get(i, i) < 0.0) {
            return Err(Error::Format(format!(
                "negative diagonal entry {} at {i}",
                self.get(i, i)
            )));
        }
        Ok(())
    }
}

fn max_asymmetry(values: &[f64], n: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((values[i * n + j] - values[j * n + i]).abs());
        }
    }
    worst
}

/// Streaming accumulator of all pairwise inner products among N vectors.
pub struct DotAccumulator {
    n: usize,
    /// Row i holds the sums for columns 0..=i.
    rows: Vec<Vec<PairwiseSum>>,
}

impl DotAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            rows: (0..n).map(|i| vec![PairwiseSum::new(); i + 1]).collect(),
        }
    }

    /// Adds coordinates `range` of the chunk, where `chunk[t]` holds vector
    /// t over the same coordinate block.
    pub fn add(&mut self, chunk: &[Vec<f64>], range: std::ops::Range<usize>) {
        assert_eq!(chunk.len(), self.n);
        let mut start = range.start;
        while start < range.end {
            let end = (start + TILE).min(range.end);
            self.rows.par_iter_mut().enumerate().for_each(|(i, row)| {
                let a = &chunk[i][start..end];
                for (j, acc) in row.iter_mut().enumerate() {
                    acc.add_products(a, &chunk[j][start..end]);
                }
            });
            start = end;
        }
    }

    pub fn finish(&self) -> Vec<f64> {
        let n = self.n;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = self.rows[i][j].total();
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        values
    }
}

/// Pairwise inner products of in-memory vectors.
pub fn dot_matrix(
    vectors: &[&[f64]],
    source: DotSource,
    step_map: Vec<(u64, u64)>,
) -> Result<DotMatrix> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} vectors, need at least 2")));
    }
    if step_map.len() != n {
        return Err(Error::Dimension(format!(
            "{n} vectors but {} step entries",
            step_map.len()
        )));
    }
    let p = vectors[0].len();
    if let Some(bad) = vectors.iter().position(|v| v.len() != p) {
        return Err(Error::Dimension(format!(
            "vector {bad} has length {}, vector 0 has {p}",
            vectors[bad].len()
        )));
    }
    let mut acc = DotAccumulator::new(n);
    let mut start = 0;
    let mut chunk = vec![Vec::new(); n];
    while start < p {
        let end = (start + STREAM_CHUNK).min(p);
        for (dst, v) in chunk.iter_mut().zip(vectors) {
            dst.clear();
            dst.extend_from_slice(&v[start..end]);
        }
        acc.add(&chunk, 0..end - start);
        start = end;
    }
    Ok(DotMatrix {
        n,
        values: acc.finish(),
        source,
        step_map,
    })
}

/// Computes the full dot matrix of a store and one restricted to each span,
/// all in a single streaming pass over the blobs.
pub fn store_dot_matrices(
    store: &Store,
    spans: &[KeySpan],
    include_full: bool,
) -> Result<(Option<DotMatrix>, Vec<DotMatrix>)> {
    let p = store.param_count() as u64;
    for span in spans {
        if span.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "group `{}` has an empty span",
                span.group_name
            )));
        }
        if let Some(r) = span.ranges.iter().find(|r| r.0 + r.1 > p) {
            return Err(Error::InvalidArgument(format!(
                "group `{}` range ({}, {}) exceeds p = {p}",
                span.group_name, r.0, r.1
            )));
        }
    }
    let mut stream = store.delta_stream(STREAM_CHUNK)?;
    let n = stream.n_deltas();
    let mut full = include_full.then(|| DotAccumulator::new(n));
    let mut groups: Vec<DotAccumulator> = spans.iter().map(|_| DotAccumulator::new(n)).collect();
    let mut chunk = vec![Vec::new(); n];
    while let Some(offset) = stream.next_chunk(&mut chunk)? {
        let len = chunk[0].len() as u64;
        let (lo, hi) = (offset as u64, offset as u64 + len);
        if let Some(acc) = full.as_mut() {
            acc.add(&chunk, 0..len as usize);
        }
        for (acc, span) in groups.iter_mut().zip(spans) {
            for &(r_off, r_len) in &span.ranges {
                let a = r_off.max(lo);
                let b = (r_off + r_len).min(hi);
                if a < b {
                    acc.add(&chunk, (a - lo) as usize..(b - lo) as usize);
                }
            }
        }
    }
    let step_map = store.delta_steps();
    let full = full.map(|acc| DotMatrix {
        n,
        values: acc.finish(),
        source: DotSource::Full,
        step_map: step_map.clone(),
    });
    let groups = groups
        .into_iter()
        .zip(spans)
        .map(|(acc, span)| DotMatrix {
            n,
            values: acc.finish(),
            source: DotSource::Group {
                name: span.group_name.clone(),
            },
            step_map: step_map.clone(),
        })
        .collect();
    Ok((full, groups))
}

/// Dot matrix restricted to one group's coordinates.
pub fn group_dot_matrix(store: &Store, span: &KeySpan) -> Result<DotMatrix> {
    let (_, mut groups) = store_dot_matrices(store, std::slice::from_ref(span), false)?;
    Ok(groups.remove(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    /// Row-major W×W values.
    pub values: Vec<f64>,
    pub window_start: usize,
    pub w: usize,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.w + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.w).map(|i| self.get(i, i)).sum()
    }

    /// Sum of every entry, i.e. `||Σ δ||²` over the window.
    pub fn total_sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Builds a Gram matrix directly from the window's vectors.
    pub fn from_vectors(vectors: &[&[f64]], window_start: usize) -> Self {
        let w = vectors.len();
        let mut values = vec![0.0; w * w];
        for i in 0..w {
            for j in 0..=i {
                let v = crate::sum::dot(vectors[i], vectors[j]);
                values[i * w + j] = v;
                values[j * w + i] = v;
            }
        }
        Self {
            values,
            window_start,
            w,
        }
    }
}

/// The W×W principal submatrix of `d` starting at delta `t0`.
pub fn window_gram(d: &DotMatrix, t0: usize, w: usize) -> Result<GramMatrix> {
    if w == 0 || t0 + w > d.n {
        return Err(Error::WindowRange {
            start: t0,
            len: w,
            n: d.n,
        });
    }
    let mut values = Vec::with_capacity(w * w);
    for i in t0..t0 + w {
        values.extend_from_slice(&d.values[i * d.n + t0..i * d.n + t0 + w]);
    }
    Ok(GramMatrix {
        values,
        window_start: t0,
        w,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub window_start: usize,
}

/// Eigenvalues of a symmetric PSD Gram matrix by cyclic Jacobi rotations.
pub fn eig_sym(g: &GramMatrix) -> Result<Spectrum> {
    let w = g.w;
    if w > MAX_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "window {w} exceeds the Jacobi limit {MAX_WINDOW}"
        )));
    }
    let scale = g.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let asym = max_asymmetry(&g.values, w);
    if asym > 1e-9 * scale {
        return Err(Error::NotSymmetric(asym / scale));
    }
    let mut eig = jacobi_eigenvalues(&g.values, w);
    let trace = g.trace();
    let tolerance = 1e-9 * trace.abs();
    for v in eig.iter_mut() {
        if *v < 0.0 {
            if *v < -tolerance {
                return Err(Error::NegativeEigenvalue {
                    value: *v,
                    tolerance: -tolerance,
                });
            }
            *v = 0.0;
        }
    }
    eig.sort_by(|a, b| b.total_cmp(a));
    let singular_values = eig.iter().map(|v| v.sqrt()).collect();
    Ok(Spectrum {
        eigenvalues: eig,
        singular_values,
        window_start: g.window_start,
    })
}

/// Cyclic Jacobi on a symmetric n×n row-major matrix, iterated until the
/// off-diagonal Frobenius norm falls below 1e-12 of the full norm.
/// Returns the (unsorted) diagonal.
pub fn jacobi_eigenvalues(values: &[f64], n: usize) -> Vec<f64> {
    let mut a = values.to_vec();
    // Symmetrize exactly so rotations act on a truly symmetric matrix.
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = 1e-12 * norm;
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= target {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// JSON header written next to a persisted dot matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DotHeader {
    pub n: usize,
    pub source: DotSource,
    pub step_map: Vec<(u64, u64)>,
    /// Fingerprint of the inputs the matrix was computed from.
    pub input_fingerprint: String,
    /// SHA-256 of the binary payload.
    pub payload_sha256: String,
}

pub fn dots_paths(dir: &Path, source: &DotSource) -> (PathBuf, PathBuf) {
    let tag = source.tag();
    (
        dir.join(format!("dots_{tag}.json")),
        dir.join(format!("dots_{tag}.bin")),
    )
}

impl DotMatrix {
    /// Writes `dots_<tag>.json` and `dots_<tag>.bin` (row-major LE f64).
    pub fn save(&self, dir: &Path, input_fingerprint: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (hpath, bpath) = dots_paths(dir, &self.source);
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let header = DotHeader {
            n: self.n,
            source: self.source.clone(),
            step_map: self.step_map.clone(),
            input_fingerprint: input_fingerprint.to_string(),
            payload_sha256: hex::encode(Sha256::digest(&bytes)),
        };
        fs::write(&bpath, &bytes).map_err(|e| Error::io(&bpath, e))?;
        let mut text = serde_json::to_string_pretty(&header)?;
        text.push('\n');
        fs::write(&hpath, text).map_err(|e| Error::io(&hpath, e))
    }

    pub fn load(dir: &Path, source: &DotSource) -> Result<(Self, DotHeader)> {
        let (hpath, bpath) = dots_paths(dir, source);
        let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
        let header: DotHeader = serde_json::from_str(&text)?;
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if hex::encode(Sha256::digest(&bytes)) != header.payload_sha256 {
            return Err(Error::Format(format!(
                "{} does not match its header checksum",
                bpath.display()
            )));
        }
        if bytes.len() != header.n * header.n * 8 {
            return Err(Error::Format(format!(
                "{} holds {} bytes, expected {}",
                bpath.display(),
                bytes.len(),
                header.n * header.n * 8
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let d = DotMatrix {
            n: header.n,
            values,
            source: header.source.clone(),
            step_map: header.step_map.clone(),
        };
        d.validate()?;
        Ok((d, header))
    }

    /// Reads only the header, for cache checks.
    pub fn peek_header(dir: &Path, source: &DotSource) -> Option<DotHeader> {
        let (hpath, _) = dots_paths(dir, source);
        let text = fs::read_to_string(hpath).ok()?;
        serde_json::from_str(&text).ok()
    }
}
