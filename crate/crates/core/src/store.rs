//! Canonical checkpoint store.
//!
//! Layout: `<dir>/manifest.json` plus one `<dir>/step_<N>.bin` per
//! checkpoint holding the flattened parameters as little-endian `f32`,
//! tensors concatenated in manifest key order. Every blob carries a SHA-256
//! checksum in the manifest which is verified whenever the blob is read.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: &str = "trajspec-store/1";

/// Bytes requested from the OS per blob read.
const READ_BUFFER: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEntry {
    pub step_index: u64,
    pub blob_path: String,
    pub param_count: u64,
    pub checksum: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub key_name: String,
    pub offset: u64,
    pub length: u64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub stripped_prefixes: Vec<String>,
    pub excluded_key_patterns: Vec<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Prefix stripping and key exclusion applied when building a store.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    #[serde(default)]
    pub stripped_prefixes: Vec<String>,
    #[serde(default)]
    pub excluded_key_patterns: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub steps: Vec<StepEntry>,
    pub key_order: Vec<KeyEntry>,
    pub filter_record: FilterRecord,
    /// Fields written by other tools; kept so a rewrite does not drop them.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Manifest {
    pub fn param_count(&self) -> usize {
        self.key_order.iter().map(|k| k.length as usize).sum()
    }

    pub fn step_indices(&self) -> Vec<u64> {
        self.steps.iter().map(|s| s.step_index).collect()
    }

    pub fn position(&self, step_index: u64) -> Option<usize> {
        self.steps
            .binary_search_by_key(&step_index, |s| s.step_index)
            .ok()
    }

    /// Checks the structural invariants: increasing steps, a common
    /// parameter count, and contiguous key offsets summing to p.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Manifest("no steps".into()));
        }
        for w in self.steps.windows(2) {
            if w[1].step_index <= w[0].step_index {
                return Err(Error::Manifest(format!(
                    "steps not strictly increasing: {} then {}",
                    w[0].step_index, w[1].step_index
                )));
            }
        }
        let mut offset = 0u64;
        let mut names = BTreeSet::new();
        for k in &self.key_order {
            if k.offset != offset {
                return Err(Error::Manifest(format!(
                    "key `{}` starts at {} but previous keys end at {}",
                    k.key_name, k.offset, offset
                )));
            }
            if !names.insert(k.key_name.as_str()) {
                return Err(Error::DuplicateKey(k.key_name.clone()));
            }
            offset += k.length;
        }
        for s in &self.steps {
            if s.param_count != offset {
                return Err(Error::Manifest(format!(
                    "step {} has param_count {} but key_order covers {} elements",
                    s.step_index, s.param_count, offset
                )));
            }
        }
        Ok(())
    }

    /// Name of the key that owns element `offset`.
    pub fn key_at(&self, offset: usize) -> &str {
        let offset = offset as u64;
        let idx = self
            .key_order
            .partition_point(|k| k.offset + k.length <= offset);
        self.key_order
            .get(idx)
            .map(|k| k.key_name.as_str())
            .unwrap_or("<out of range>")
    }

    /// Content fingerprint: hash over step indices, blob checksums and key
    /// layout. Two manifests describing the same data share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.steps {
            h.update(s.step_index.to_le_bytes());
            h.update(s.checksum.as_bytes());
        }
        for k in &self.key_order {
            h.update(k.key_name.as_bytes());
            h.update([0u8]);
            h.update(k.offset.to_le_bytes());
            h.update(k.length.to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}

/// Flattened parameters of one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub step_index: u64,
    pub values: Vec<f32>,
}

/// Difference between two consecutive checkpoints, held in `f64` so the
/// subtraction of two `f32` values is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaVector {
    pub from_step: u64,
    pub to_step: u64,
    pub values: Vec<f64>,
}

/// A group of parameter tensors addressed by element ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeySpan {
    pub group_name: String,
    pub ranges: Vec<(u64, u64)>,
}

impl KeySpan {
    pub fn len(&self) -> u64 {
        self.ranges.iter().map(|r| r.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An opened store: the manifest plus the directory holding the blobs.
#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
    manifest: Manifest,
}

impl Store {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn param_count(&self) -> usize {
        self.manifest.param_count()
    }

    /// Rewrites `manifest.json`, preserving unknown fields.
    pub fn save_manifest(&self) -> Result<()> {
        write_manifest(&self.root, &self.manifest)
    }

    fn entry(&self, step_index: u64) -> Result<&StepEntry> {
        self.manifest
            .position(step_index)
            .map(|i| &self.manifest.steps[i])
            .ok_or(Error::StepNotFound(step_index))
    }

    /// Opens a checksum-verifying streaming reader over one blob.
    pub fn reader(&self, step_index: u64) -> Result<BlobReader<'_>> {
        let entry = self.entry(step_index)?;
        let path = self.root.join(&entry.blob_path);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let expected_len = entry.param_count * 4;
        if len != expected_len {
            return Err(Error::Format(format!(
                "{} holds {len} bytes, manifest expects {expected_len}",
                path.display()
            )));
        }
        Ok(BlobReader {
            manifest: &self.manifest,
            entry,
            path,
            reader: BufReader::with_capacity(READ_BUFFER, file),
            hasher: Sha256::new(),
            position: 0,
            bytes: Vec::new(),
        })
    }

    /// Reads and verifies a full parameter vector.
    pub fn load_vector(&self, step_index: u64) -> Result<ParamVector> {
        let mut reader = self.reader(step_index)?;
        let mut values = vec![0f32; reader.len()];
        let mut done = 0;
        while done < values.len() {
            let n = reader.read_chunk(&mut values[done..])?;
            done += n;
        }
        reader.finish()?;
        Ok(ParamVector { step_index, values })
    }

    /// Loads every delta into memory. Intended for small stores; large ones
    /// should go through [`DeltaStream`].
    pub fn load_deltas(&self) -> Result<Vec<DeltaVector>> {
        let mut out = Vec::with_capacity(self.manifest.steps.len().saturating_sub(1));
        let mut prev = self.load_vector(self.manifest.steps[0].step_index)?;
        for s in &self.manifest.steps[1..] {
            let next = self.load_vector(s.step_index)?;
            out.push(compute_delta(&self.manifest, &prev, &next)?);
            prev = next;
        }
        Ok(out)
    }

    /// (from_step, to_step) of every adjacent delta.
    pub fn delta_steps(&self) -> Vec<(u64, u64)> {
        self.manifest
            .steps
            .windows(2)
            .map(|w| (w[0].step_index, w[1].step_index))
            .collect()
    }

    pub fn delta_stream(&self, chunk: usize) -> Result<DeltaStream<'_>> {
        DeltaStream::new(self, chunk)
    }
}

/// Streaming reader over one blob. Values are checked for finiteness as
/// they are read; the checksum is checked by [`BlobReader::finish`].
pub struct BlobReader<'a> {
    manifest: &'a Manifest,
    entry: &'a StepEntry,
    path: PathBuf,
    reader: BufReader<File>,
    hasher: Sha256,
    position: usize,
    bytes: Vec<u8>,
}

impl BlobReader<'_> {
    pub fn len(&self) -> usize {
        self.entry.param_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn remaining(&self) -> usize {
        self.len() - self.position
    }

    /// Fills up to `out.len()` values; returns how many were read.
    pub fn read_chunk(&mut self, out: &mut [f32]) -> Result<usize> {
        let n = out.len().min(self.remaining());
        self.bytes.resize(n * 4, 0);
        self.reader
            .read_exact(&mut self.bytes)
            .map_err(|e| Error::io(&self.path, e))?;
        self.hasher.update(&self.bytes);
        for (i, (v, b)) in out.iter_mut().zip(self.bytes.chunks_exact(4)).enumerate() {
            let x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !x.is_finite() {
                let offset = self.position + i;
                return Err(Error::NonFinite {
                    step: self.entry.step_index,
                    key: self.manifest.key_at(offset).to_string(),
                    offset,
                });
            }
            *v = x;
        }
        self.position += n;
        Ok(n)
    }

    /// Verifies the checksum once every value has been read.
    pub fn finish(self) -> Result<()> {
        if self.position != self.len() {
            return Err(Error::Format(format!(
                "blob for step {} finished after {} of {} values",
                self.entry.step_index,
                self.position,
                self.len()
            )));
        }
        let found = hex::encode(self.hasher.finalize());
        if found != self.entry.checksum {
            return Err(Error::Checksum {
                step: self.entry.step_index,
                expected: self.entry.checksum.clone(),
                found,
            });
        }
        Ok(())
    }
}

/// Streams every delta of a store in lock-step coordinate chunks, reading
/// each blob exactly once. Checksums are verified when the stream ends.
pub struct DeltaStream<'a> {
    readers: Vec<BlobReader<'a>>,
    chunk: usize,
    offset: usize,
    p: usize,
    current: Vec<f32>,
    next: Vec<f32>,
}

impl<'a> DeltaStream<'a> {
    fn new(store: &'a Store, chunk: usize) -> Result<Self> {
        if chunk == 0 {
            return Err(Error::InvalidArgument("chunk size must be positive".into()));
        }
        if store.manifest.steps.len() < 2 {
            return Err(Error::InsufficientData("store needs at least two steps".into()));
        }
        let readers = store
            .manifest
            .steps
            .iter()
            .map(|s| store.reader(s.step_index))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            readers,
            chunk,
            offset: 0,
            p: store.param_count(),
            current: Vec::new(),
            next: Vec::new(),
        })
    }

    pub fn n_deltas(&self) -> usize {
        self.readers.len() - 1
    }

    /// Fills `out[t]` with delta `t` over the next coordinate chunk and
    /// returns its starting offset, or `None` once all coordinates were
    /// delivered (after verifying every checksum).
    pub fn next_chunk(&mut self, out: &mut [Vec<f64>]) -> Result<Option<usize>> {
        assert_eq!(out.len(), self.n_deltas());
        let len = self.chunk.min(self.p - self.offset);
        if len == 0 {
            for r in self.readers.drain(..) {
                r.finish()?;
            }
            return Ok(None);
        }
        self.current.resize(len, 0.0);
        self.next.resize(len, 0.0);
        self.readers[0].read_chunk(&mut self.current)?;
        for t in 0..out.len() {
            self.readers[t + 1].read_chunk(&mut self.next)?;
            let dst = &mut out[t];
            dst.clear();
            dst.extend(
                self.next
                    .iter()
                    .zip(&self.current)
                    .map(|(&b, &a)| b as f64 - a as f64),
            );
            std::mem::swap(&mut self.current, &mut self.next);
        }
        let start = self.offset;
        self.offset += len;
        Ok(Some(start))
    }
}

/// δ = b − a, requiring `b` to be the manifest successor of `a`.
pub fn compute_delta(manifest: &Manifest, a: &ParamVector, b: &ParamVector) -> Result<DeltaVector> {
    let ia = manifest
        .position(a.step_index)
        .ok_or(Error::StepNotFound(a.step_index))?;
    let ib = manifest
        .position(b.step_index)
        .ok_or(Error::StepNotFound(b.step_index))?;
    if ib != ia + 1 {
        return Err(Error::NotAdjacent {
            from: a.step_index,
            to: b.step_index,
        });
    }
    if a.values.len() != b.values.len() {
        return Err(Error::Dimension(format!(
            "steps {} and {} have {} and {} values",
            a.step_index,
            b.step_index,
            a.values.len(),
            b.values.len()
        )));
    }
    Ok(DeltaVector {
        from_step: a.step_index,
        to_step: b.step_index,
        values: b
            .values
            .iter()
            .zip(&a.values)
            .map(|(&y, &x)| y as f64 - x as f64)
            .collect(),
    })
}

/// Compiles a user pattern anchored at the start of the key.
pub fn anchored(pattern: &str) -> Result<Regex> {
    Ok(Regex::new(&format!("^(?:{pattern})"))?)
}

/// Assigns each key to the first group whose pattern matches it; keys no
/// pattern claims land in an implicit `other` group. Returns the spans and
/// a warning per group that matched nothing.
pub fn group_spans(
    manifest: &Manifest,
    grouping: &[(String, String)],
) -> Result<(Vec<KeySpan>, Vec<String>)> {
    let compiled = grouping
        .iter()
        .map(|(name, pat)| Ok((name.as_str(), anchored(pat)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut spans: Vec<KeySpan> = grouping
        .iter()
        .map(|(name, _)| KeySpan {
            group_name: name.clone(),
            ranges: Vec::new(),
        })
        .collect();
    let mut other = KeySpan {
        group_name: "other".into(),
        ranges: Vec::new(),
    };
    for key in &manifest.key_order {
        let target = match compiled.iter().position(|(_, re)| re.is_match(&key.key_name)) {
            Some(g) => &mut spans[g],
            None => &mut other,
        };
        push_range(&mut target.ranges, key.offset, key.length);
    }
    let warnings = spans
        .iter()
        .filter(|s| s.ranges.is_empty())
        .map(|s| format!("group `{}` matched no keys", s.group_name))
        .collect();
    if !other.ranges.is_empty() {
        spans.push(other);
    }
    Ok((spans, warnings))
}

fn push_range(ranges: &mut Vec<(u64, u64)>, offset: u64, length: u64) {
    if length == 0 {
        return;
    }
    if let Some(last) = ranges.last_mut() {
        if last.0 + last.1 == offset {
            last.1 += length;
            return;
        }
    }
    ranges.push((offset, length));
}

/// Writes blobs and a manifest for a new store.
pub struct StoreWriter {
    root: PathBuf,
    manifest: Manifest,
}

impl StoreWriter {
    /// `keys` are (name, length) in final storage order.
    pub fn create(
        dir: impl AsRef<Path>,
        keys: &[(String, u64)],
        filter: FilterRecord,
    ) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut offset = 0;
        let key_order = keys
            .iter()
            .map(|(name, length)| {
                let k = KeyEntry {
                    key_name: name.clone(),
                    offset,
                    length: *length,
                    extra: Map::new(),
                };
                offset += length;
                k
            })
            .collect();
        Ok(Self {
            root,
            manifest: Manifest {
                version: MANIFEST_VERSION.into(),
                steps: Vec::new(),
                key_order,
                filter_record: filter,
                extra: Map::new(),
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.manifest.param_count()
    }

    /// Opens a streamed blob for `step_index`. Several blobs may be open at
    /// once; each is recorded by [`StoreWriter::push_step`] after
    /// [`BlobWriter::finish`], in increasing step order.
    pub fn open_blob(&self, step_index: u64) -> Result<BlobWriter> {
        let name = format!("step_{step_index}.bin");
        let path = self.root.join(&name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(BlobWriter {
            keys: self.manifest.key_order.clone(),
            param_count: self.param_count(),
            step_index,
            name,
            path,
            out: BufWriter::with_capacity(READ_BUFFER, file),
            hasher: Sha256::new(),
            written: 0,
            bytes: Vec::new(),
        })
    }

    /// Records a finished blob; its step must exceed every step so far.
    pub fn push_step(&mut self, entry: StepEntry) -> Result<()> {
        if let Some(last) = self.manifest.steps.last() {
            if entry.step_index <= last.step_index {
                return Err(Error::InvalidArgument(format!(
                    "step {} written after step {}",
                    entry.step_index, last.step_index
                )));
            }
        }
        self.manifest.steps.push(entry);
        Ok(())
    }

    pub fn write_step(&mut self, step_index: u64, values: &[f32]) -> Result<()> {
        let mut w = self.open_blob(step_index)?;
        w.write(values)?;
        let entry = w.finish()?;
        self.push_step(entry)
    }

    pub fn finish(self) -> Result<Store> {
        self.manifest.validate()?;
        write_manifest(&self.root, &self.manifest)?;
        Ok(Store {
            root: self.root,
            manifest: self.manifest,
        })
    }
}

pub struct BlobWriter {
    keys: Vec<KeyEntry>,
    param_count: usize,
    step_index: u64,
    name: String,
    path: PathBuf,
    out: BufWriter<File>,
    hasher: Sha256,
    written: usize,
    bytes: Vec<u8>,
}

impl BlobWriter {
    pub fn write(&mut self, values: &[f32]) -> Result<()> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let offset = self.written + i;
            let key = self
                .keys
                .iter()
                .find(|k| (offset as u64) >= k.offset && (offset as u64) < k.offset + k.length)
                .map_or("<unknown>", |k| k.key_name.as_str());
            return Err(Error::NonFinite {
                step: self.step_index,
                key: key.to_string(),
                offset,
            });
        }
        self.bytes.clear();
        self.bytes.reserve(values.len() * 4);
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.hasher.update(&self.bytes);
        self.out
            .write_all(&self.bytes)
            .map_err(|e| Error::io(&self.path, e))?;
        self.written += values.len();
        Ok(())
    }

    pub fn finish(mut self) -> Result<StepEntry> {
        let p = self.param_count;
        if self.written != p {
            return Err(Error::Dimension(format!(
                "step {} received {} values, expected {p}",
                self.step_index, self.written
            )));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(StepEntry {
            step_index: self.step_index,
            blob_path: self.name,
            param_count: p as u64,
            checksum: hex::encode(self.hasher.finalize_reset()),
            extra: Map::new(),
        })
    }
}

fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Tensor listing of a raw checkpoint dump, `ckpt_<N>.index.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawIndex {
    pub tensors: Vec<RawTensor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawTensor {
    pub name: String,
    pub length: u64,
}

/// Writes a raw checkpoint dump: an index listing tensors in file order and
/// a `ckpt_<N>.bin` of their concatenated little-endian `f32` values.
pub fn write_raw_checkpoint(dir: &Path, step: u64, tensors: &[(&str, &[f32])]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index = RawIndex {
        tensors: tensors
            .iter()
            .map(|(name, v)| RawTensor {
                name: (*name).to_string(),
                length: v.len() as u64,
            })
            .collect(),
    };
    let ipath = dir.join(format!("ckpt_{step}.index.json"));
    fs::write(&ipath, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&ipath, e))?;
    let bpath = dir.join(format!("ckpt_{step}.bin"));
    let mut bytes = Vec::new();
    for (_, v) in tensors {
        for x in *v {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(&bpath, bytes).map_err(|e| Error::io(&bpath, e))
}

/// Builds a canonical store in `store_dir` from the raw dumps in `raw_dir`:
/// strips the first matching prefix from every key, drops keys matching an
/// exclusion pattern, sorts the survivors and writes one blob per step.
pub fn build_manifest(raw_dir: &Path, store_dir: &Path, filter: &FilterConfig) -> Result<Store> {
    let name_re = Regex::new(r"^ckpt_(\d+)\.index\.json$").expect("static regex");
    let mut steps = BTreeMap::new();
    for entry in fs::read_dir(raw_dir).map_err(|e| Error::io(raw_dir, e))? {
        let entry = entry.map_err(|e| Error::io(raw_dir, e))?;
        let name = entry.file_name();
        if let Some(c) = name.to_str().and_then(|n| name_re.captures(n)) {
            let step: u64 = c[1]
                .parse()
                .map_err(|_| Error::Manifest(format!("unparseable step in {}", &c[0])))?;
            steps.insert(step, entry.path());
        }
    }
    if steps.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} holds {} checkpoint dumps, need at least 2",
            raw_dir.display(),
            steps.len()
        )));
    }
    let excluded = filter
        .excluded_key_patterns
        .iter()
        .map(|p| anchored(p))
        .collect::<Result<Vec<_>>>()?;

    // Per step: raw index, and the retained (stripped name -> raw offset, length).
    let mut layouts = Vec::new();
    for (&step, path) in &steps {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: RawIndex = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let mut kept = BTreeMap::new();
        let mut raw_offset = 0u64;
        for t in &index.tensors {
            let stripped = strip_prefix(&t.name, &filter.stripped_prefixes);
            if !excluded.iter().any(|re| re.is_match(stripped)) {
                if kept
                    .insert(stripped.to_string(), (raw_offset, t.length))
                    .is_some()
                {
                    return Err(Error::DuplicateKey(stripped.to_string()));
                }
            }
            raw_offset += t.length;
        }
        layouts.push((step, kept, raw_offset));
    }

    let reference = &layouts[0].1;
    for (step, kept, _) in &layouts[1..] {
        let a: BTreeSet<_> = reference.keys().collect();
        let b: BTreeSet<_> = kept.keys().collect();
        let diff: Vec<String> = a.symmetric_difference(&b).map(|k| k.to_string()).collect();
        if !diff.is_empty() {
            return Err(Error::KeyMismatch(format!(
                "step {step} differs from step {} in keys: {}",
                layouts[0].0,
                diff.join(", ")
            )));
        }
        for (k, (_, len)) in kept {
            if reference[k].1 != *len {
                return Err(Error::KeyMismatch(format!(
                    "key `{k}` has {} elements at step {} but {len} at step {step}",
                    reference[k].1, layouts[0].0
                )));
            }
        }
    }

    let keys: Vec<(String, u64)> = reference.iter().map(|(k, v)| (k.clone(), v.1)).collect();
    let record = FilterRecord {
        stripped_prefixes: filter.stripped_prefixes.clone(),
        excluded_key_patterns: filter.excluded_key_patterns.clone(),
        extra: Map::new(),
    };
    let mut writer = StoreWriter::create(store_dir, &keys, record)?;
    for (step, kept, raw_len) in &layouts {
        let bpath = raw_dir.join(format!("ckpt_{step}.bin"));
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if bytes.len() as u64 != raw_len * 4 {
            return Err(Error::Format(format!(
                "{} holds {} bytes, index lists {} values",
                bpath.display(),
                bytes.len(),
                raw_len
            )));
        }
        let mut blob = writer.open_blob(*step)?;
        let mut buf = Vec::new();
        for (raw_off, len) in kept.values() {
            let start = *raw_off as usize * 4;
            let end = start + *len as usize * 4;
            buf.clear();
            buf.extend(
                bytes[start..end]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            );
            blob.write(&buf)?;
        }
        writer.push_step(blob.finish()?)?;
    }
    writer.finish()
}

fn strip_prefix<'a>(name: &'a str, prefixes: &[String]) -> &'a str {
    for p in prefixes {
        if let Some(rest) = name.strip_prefix(p.as_str()) {
            return rest;
        }
    }
    name
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_store(dir: &Path, steps: &[(u64, Vec<f32>)]) -> Store {
        let p = steps[0].1.len() as u64;
        let mut w = StoreWriter::create(
            dir,
            &[("a".into(), p / 2), ("b".into(), p - p / 2)],
            FilterRecord::default(),
        )
        .unwrap();
        for (s, v) in steps {
            w.write_step(*s, v).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn load_reads_back_values() {
        let dir = tempfile::tempdir().unwrap();
        let store = tiny_store(dir.path(), &[(0, vec![1.0, 2.0, 3.0, 4.0]), (200, vec![0.0; 4])]);
        let v = store.load_vector(0).unwrap();
        assert_eq!(v.values, vec![1.0, 2.0, 3.0, 4.0]);
        let reopened = Store::open(dir.path()).unwrap();
        assert_eq!(reopened.manifest(), store.manifest());
    }

    #[test]
    fn missing_step_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = tiny_store(dir.path(), &[(0, vec![1.0; 4]), (200, vec![0.0; 4])]);
        assert!(matches!(store.load_vector(999), Err(Error::StepNotFound(999))));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        tiny_store(dir.path(), &[(0, vec![1.0, 2.0, 3.0, 4.0]), (200, vec![0.0; 4])]);
        let blob = dir.path().join("step_0.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[5] ^= 0x01;
        fs::write(&blob, bytes).unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(matches!(store.load_vector(0), Err(Error::Checksum { step: 0, .. })));
    }

    #[test]
    fn nan_reports_its_key() {
        let dir = tempfile::tempdir().unwrap();
        tiny_store(dir.path(), &[(0, vec![1.0, 2.0, 3.0, 4.0]), (200, vec![0.0; 4])]);
        let blob = dir.path().join("step_200.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&blob, bytes).unwrap();
        let store = Store::open(dir.path()).unwrap();
        match store.load_vector(200) {
            Err(Error::NonFinite { key, offset, .. }) => {
                assert_eq!(key, "b");
                assert_eq!(offset, 3);
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn delta_examples() {
        let dir = tempfile::tempdir().unwrap();
        let store = tiny_store(
            dir.path(),
            &[
                (200, vec![1.0, 1.0]),
                (400, vec![3.0, 0.0]),
                (600, vec![3.0, 0.0]),
            ],
        );
        let m = store.manifest();
        let a = store.load_vector(200).unwrap();
        let b = store.load_vector(400).unwrap();
        let c = store.load_vector(600).unwrap();
        assert_eq!(compute_delta(m, &a, &b).unwrap().values, vec![2.0, -1.0]);
        assert_eq!(compute_delta(m, &b, &c).unwrap().values, vec![0.0, 0.0]);
        assert!(matches!(
            compute_delta(m, &a, &c),
            Err(Error::NotAdjacent { from: 200, to: 600 })
        ));
    }

    #[test]
    fn stream_matches_in_memory_deltas() {
        let dir = tempfile::tempdir().unwrap();
        let steps: Vec<(u64, Vec<f32>)> = (0..4)
            .map(|s| (s * 10, (0..37).map(|i| (i * s) as f32 * 0.25 - 3.0).collect()))
            .collect();
        let store = tiny_store(dir.path(), &steps);
        let deltas = store.load_deltas().unwrap();
        let mut stream = store.delta_stream(5).unwrap();
        let mut out = vec![Vec::new(); 3];
        let mut got = vec![Vec::new(); 3];
        while let Some(_) = stream.next_chunk(&mut out).unwrap() {
            for t in 0..3 {
                got[t].extend_from_slice(&out[t]);
            }
        }
        for t in 0..3 {
            assert_eq!(got[t], deltas[t].values);
        }
    }

    #[test]
    fn unknown_manifest_fields_survive_rewrite() {
        let dir = tempfile::tempdir().unwrap();
        tiny_store(dir.path(), &[(0, vec![1.0; 4]), (200, vec![0.0; 4])]);
        let path = dir.path().join(MANIFEST_FILE);
        let mut doc: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        doc["producer"] = Value::from("exporter 0.3");
        doc["steps"][0]["note"] = Value::from("warmup");
        fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.save_manifest().unwrap();
        let back: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back["producer"], "exporter 0.3");
        assert_eq!(back["steps"][0]["note"], "warmup");
    }

    #[test]
    fn manifest_rejects_gapped_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let store = tiny_store(dir.path(), &[(0, vec![1.0; 4]), (200, vec![0.0; 4])]);
        let mut m = store.manifest().clone();
        m.key_order[1].offset = 3;
        assert!(matches!(m.validate(), Err(Error::Manifest(_))));
    }
}
