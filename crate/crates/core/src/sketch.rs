//! Streaming Gaussian (Johnson–Lindenstrauss) sketches of delta vectors.
//!
//! Coordinate j of a sketch is `(1/√d) Σ_i δ_i g(seed, j, i)` where `g` is
//! the counter-based generator from [`crate::rng`]. The projection matrix is
//! never stored: each block of each row is regenerated when needed, and the
//! per-row sums go through [`PairwiseSum`], so results do not depend on the
//! block size or on thread scheduling.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gram::{self, DotMatrix, DotSource};
use crate::rng;
use crate::store::{DeltaVector, Store};
use crate::sum::PairwiseSum;

/// Identifies the variate generator; part of every fingerprint so sketches
/// from a different generator are never mixed.
pub const GENERATOR_ID: &str = "splitmix64-as241/1";

pub const SKETCH_INDEX: &str = "sketches.json";

/// Label separating projection streams from other uses of the same seed.
const STREAM_LABEL: u64 = 0x736b_6574_6368;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchConfig {
    pub d: usize,
    pub seed: u64,
    /// Coordinates generated per block. Affects speed and memory only.
    pub block_size: usize,
}

impl SketchConfig {
    pub fn new(d: usize, seed: u64) -> Self {
        Self {
            d,
            seed,
            block_size: 1 << 14,
        }
    }

    /// The default target dimension for window length `w`: d = 10·W.
    pub fn for_window(w: usize, seed: u64) -> Self {
        Self::new(10 * w, seed)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(GENERATOR_ID.as_bytes());
        h.update((self.d as u64).to_le_bytes());
        h.update(self.seed.to_le_bytes());
        hex::encode(&h.finalize()[..16])
    }

    fn check(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidArgument("sketch dimension must be positive".into()));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidArgument("sketch block size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SketchVector {
    pub values: Vec<f64>,
    pub from_step: u64,
    pub to_step: u64,
    pub config_fingerprint: String,
}

/// Accumulates sketches of several vectors at once, so each block of the
/// projection is generated a single time however many vectors share it.
pub struct Projector {
    config: SketchConfig,
    /// rows[j][t] accumulates coordinate j of vector t.
    rows: Vec<Vec<PairwiseSum>>,
    n: usize,
}

impl Projector {
    pub fn new(config: SketchConfig, n_vectors: usize) -> Result<Self> {
        config.check()?;
        Ok(Self {
            config,
            rows: vec![vec![PairwiseSum::new(); n_vectors]; config.d],
            n: n_vectors,
        })
    }

    /// Adds coordinates `offset..offset + len` where `chunk[t]` holds vector
    /// t over that range.
    pub fn add(&mut self, chunk: &[Vec<f64>], offset: usize) -> Result<()> {
        assert_eq!(chunk.len(), self.n);
        let len = chunk.first().map_or(0, |c| c.len());
        for (t, c) in chunk.iter().enumerate() {
            if c.len() != len {
                return Err(Error::Dimension(format!("chunk {t} has length {}", c.len())));
            }
            if let Some(i) = c.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "vector {t} has a non-finite value at coordinate {}",
                    offset + i
                )));
            }
        }
        let seed = rng::derive_seed(self.config.seed, STREAM_LABEL);
        let block = self.config.block_size;
        self.rows.par_iter_mut().enumerate().for_each_init(
            || vec![0.0f64; block],
            |g, (j, accs)| {
                let key = rng::row_key(seed, j as u64);
                let mut start = 0;
                while start < len {
                    let end = (start + block).min(len);
                    let g = &mut g[..end - start];
                    for (k, v) in g.iter_mut().enumerate() {
                        *v = rng::normal_at(key, (offset + start + k) as u64);
                    }
                    for (acc, c) in accs.iter_mut().zip(chunk) {
                        acc.add_products(&c[start..end], g);
                    }
                    start = end;
                }
            },
        );
        Ok(())
    }

    /// Sketch values per vector, scaled by 1/√d.
    pub fn finish(self) -> Vec<Vec<f64>> {
        let scale = 1.0 / (self.config.d as f64).sqrt();
        (0..self.n)
            .map(|t| self.rows.iter().map(|r| r[t].total() * scale).collect())
            .collect()
    }
}

/// Sketches a single delta.
pub fn project(delta: &DeltaVector, config: &SketchConfig) -> Result<SketchVector> {
    let mut proj = Projector::new(*config, 1)?;
    let mut start = 0;
    let p = delta.values.len();
    let mut chunk = vec![Vec::new()];
    while start < p {
        let end = (start + gram::STREAM_CHUNK).min(p);
        chunk[0].clear();
        chunk[0].extend_from_slice(&delta.values[start..end]);
        proj.add(&chunk, start)?;
        start = end;
    }
    Ok(SketchVector {
        values: proj.finish().remove(0),
        from_step: delta.from_step,
        to_step: delta.to_step,
        config_fingerprint: config.fingerprint(),
    })
}

/// Index document of a sketch store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchIndex {
    pub config_fingerprint: String,
    pub generator: String,
    pub d: usize,
    pub seed: u64,
    /// (from_step, to_step) per sketch, in delta order.
    pub steps: Vec<(u64, u64)>,
    /// Fingerprint of the checkpoint store the sketches came from.
    pub source_fingerprint: String,
}

fn sketch_path(dir: &Path, to_step: u64) -> PathBuf {
    dir.join(format!("sketch_{to_step}.bin"))
}

/// Outcome of [`project_store`].
#[derive(Debug)]
pub enum ProjectOutcome {
    Written(Vec<SketchVector>),
    /// An identical sketch store already existed and was reused.
    Reused(Vec<SketchVector>),
}

impl ProjectOutcome {
    pub fn sketches(&self) -> &[SketchVector] {
        match self {
            ProjectOutcome::Written(s) | ProjectOutcome::Reused(s) => s,
        }
    }
}

/// Sketches every delta of `store` into `out_dir`, streaming each blob once.
/// An existing sketch store with a different fingerprint is only replaced
/// when `overwrite` is set.
pub fn project_store(
    store: &Store,
    config: &SketchConfig,
    out_dir: &Path,
    overwrite: bool,
) -> Result<ProjectOutcome> {
    config.check()?;
    let source = store.manifest().fingerprint();
    let fingerprint = config.fingerprint();
    if let Some(existing) = read_index(out_dir)? {
        if existing.config_fingerprint == fingerprint && existing.source_fingerprint == source {
            return Ok(ProjectOutcome::Reused(load_sketches(out_dir)?.1));
        }
        if !overwrite {
            let (have, want) = if existing.config_fingerprint != fingerprint {
                (existing.config_fingerprint, fingerprint)
            } else {
                (existing.source_fingerprint, source)
            };
            return Err(Error::FingerprintMismatch {
                path: out_dir.to_path_buf(),
                existing: have,
                requested: want,
            });
        }
        for (_, to) in &existing.steps {
            let _ = fs::remove_file(sketch_path(out_dir, *to));
        }
    }

    let mut stream = store.delta_stream(gram::STREAM_CHUNK)?;
    let n = stream.n_deltas();
    let mut proj = Projector::new(*config, n)?;
    let mut chunk = vec![Vec::new(); n];
    while let Some(offset) = stream.next_chunk(&mut chunk)? {
        proj.add(&chunk, offset)?;
    }
    let steps = store.delta_steps();
    let sketches: Vec<SketchVector> = proj
        .finish()
        .into_iter()
        .zip(&steps)
        .map(|(values, &(from_step, to_step))| SketchVector {
            values,
            from_step,
            to_step,
            config_fingerprint: fingerprint.clone(),
        })
        .collect();

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for s in &sketches {
        let path = sketch_path(out_dir, s.to_step);
        let bytes: Vec<u8> = s.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let index = SketchIndex {
        config_fingerprint: fingerprint,
        generator: GENERATOR_ID.into(),
        d: config.d,
        seed: config.seed,
        steps,
        source_fingerprint: source,
    };
    let path = out_dir.join(SKETCH_INDEX);
    let mut text = serde_json::to_string_pretty(&index)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(ProjectOutcome::Written(sketches))
}

fn read_index(dir: &Path) -> Result<Option<SketchIndex>> {
    let path = dir.join(SKETCH_INDEX);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Reads a sketch store written by [`project_store`].
pub fn load_sketches(dir: &Path) -> Result<(SketchIndex, Vec<SketchVector>)> {
    let index = read_index(dir)?
        .ok_or_else(|| Error::Format(format!("no {SKETCH_INDEX} in {}", dir.display())))?;
    let mut out = Vec::with_capacity(index.steps.len());
    for &(from_step, to_step) in &index.steps {
        let path = sketch_path(dir, to_step);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != index.d * 8 {
            return Err(Error::Format(format!(
                "{} holds {} bytes, expected {}",
                path.display(),
                bytes.len(),
                index.d * 8
            )));
        }
        out.push(SketchVector {
            values: bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect(),
            from_step,
            to_step,
            config_fingerprint: index.config_fingerprint.clone(),
        });
    }
    Ok((index, out))
}

/// Dot matrix over sketches, tagged with their config fingerprint.
pub fn sketch_dot_matrix(sketches: &[SketchVector]) -> Result<DotMatrix> {
    let fingerprint = sketches
        .first()
        .map(|s| s.config_fingerprint.clone())
        .unwrap_or_default();
    if sketches.iter().any(|s| s.config_fingerprint != fingerprint) {
        return Err(Error::InvalidArgument(
            "sketches come from different configurations".into(),
        ));
    }
    let vectors: Vec<&[f64]> = sketches.iter().map(|s| s.values.as_slice()).collect();
    gram::dot_matrix(
        &vectors,
        DotSource::Sketched { fingerprint },
        sketches.iter().map(|s| (s.from_step, s.to_step)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta(values: Vec<f64>) -> DeltaVector {
        DeltaVector {
            from_step: 0,
            to_step: 1,
            values,
        }
    }

    fn gaussian_delta(seed: u64, p: usize) -> DeltaVector {
        let mut v = vec![0.0; p];
        rng::fill_gaussian_row(seed, 0, 0, &mut v);
        delta(v)
    }

    #[test]
    fn zero_delta_gives_zero_sketch() {
        let s = project(&delta(vec![0.0; 500]), &SketchConfig::new(17, 3)).unwrap();
        assert!(s.values.iter().all(|v| *v == 0.0));
        assert_eq!(s.values.len(), 17);
    }

    #[test]
    fn block_size_does_not_change_the_result() {
        let d = gaussian_delta(1, 20_000);
        let mut small = SketchConfig::new(8, 42);
        small.block_size = 1_024;
        let mut large = small;
        large.block_size = 1 << 20;
        let mut odd = small;
        odd.block_size = 333;
        let a = project(&d, &small).unwrap();
        let b = project(&d, &large).unwrap();
        let c = project(&d, &odd).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.config_fingerprint, c.config_fingerprint);
    }

    #[test]
    fn projection_is_linear() {
        let cfg = SketchConfig::new(12, 9);
        let d1 = gaussian_delta(2, 3000);
        let d2 = gaussian_delta(3, 3000);
        let (a, b) = (2.5, -0.75);
        let combo = delta(
            d1.values
                .iter()
                .zip(&d2.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        );
        let s1 = project(&d1, &cfg).unwrap();
        let s2 = project(&d2, &cfg).unwrap();
        let sc = project(&combo, &cfg).unwrap();
        let norm = sc.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..12 {
            let lin = a * s1.values[j] + b * s2.values[j];
            assert!((sc.values[j] - lin).abs() <= 1e-10 * norm);
        }
    }

    #[test]
    fn fingerprint_depends_on_d_and_seed_only() {
        let a = SketchConfig::new(100, 1);
        let mut b = a;
        b.block_size = 7;
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), SketchConfig::new(100, 2).fingerprint());
        assert_ne!(a.fingerprint(), SketchConfig::new(101, 1).fingerprint());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut v = vec![1.0; 10];
        v[4] = f64::INFINITY;
        assert!(project(&delta(v), &SketchConfig::new(4, 0)).is_err());
    }
}
