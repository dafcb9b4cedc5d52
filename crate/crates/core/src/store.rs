// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation and token shards, snapshot manifests and aligned streaming.
//!
//! ## `.acts` layout (little endian)
//!
//! ```text
//! offset  size  field
//!      0     4  magic "XACT"
//!      4     4  version (u32) = 1
//!      8     4  d_model (u32)
//!     12     1  dtype (u8) = 0 -> f32
//!     13     3  zero padding
//!     16     8  n_rows (u64)
//!     24     *  n_rows * d_model f32 values, row major
//! ```
//!
//! ## `.toks` layout (little endian)
//!
//! ```text
//! magic "XTOK" | version u32 | n_seqs u32 | seq_lengths u32 * n_seqs
//!             | n_tokens u64 | token ids u32 * n_tokens
//! ```
//!
//! Row `i` of an activation shard corresponds to token `i` of the paired
//! token shard in concatenated sequence order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ACTS_MAGIC: [u8; 4] = *b"XACT";
pub const TOKS_MAGIC: [u8; 4] = *b"XTOK";
pub const FORMAT_VERSION: u32 = 1;
pub const ACTS_HEADER_LEN: u64 = 24;
const DTYPE_F32: u8 = 0;

// ---------------------------------------------------------------------------
// Activation shards
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActsHeader {
    pub d_model: usize,
    pub n_rows: u64,
}

impl ActsHeader {
    fn encode(&self) -> [u8; ACTS_HEADER_LEN as usize] {
        let mut buf = [0u8; ACTS_HEADER_LEN as usize];
        buf[0..4].copy_from_slice(&ACTS_MAGIC);
        buf[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf[8..12].copy_from_slice(&(self.d_model as u32).to_le_bytes());
        buf[12] = DTYPE_F32;
        buf[16..24].copy_from_slice(&self.n_rows.to_le_bytes());
        buf
    }

    fn decode(buf: &[u8; ACTS_HEADER_LEN as usize], path: &Path) -> Result<Self> {
        if buf[0..4] != ACTS_MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic {:02x?}, expected XACT",
                path.display(),
                &buf[0..4]
            )));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        if buf[12] != DTYPE_F32 {
            return Err(Error::Format(format!(
                "{}: unsupported dtype {}",
                path.display(),
                buf[12]
            )));
        }
        let d_model = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        if d_model == 0 {
            return Err(Error::Format(format!("{}: d_model is zero", path.display())));
        }
        let n_rows = u64::from_le_bytes(buf[16..24].try_into().unwrap());
        Ok(Self { d_model, n_rows })
    }

    pub fn payload_len(&self) -> u64 {
        4 * self.n_rows * self.d_model as u64
    }
}

/// Write `rows` (one token per row) as an `.acts` shard.
///
/// Every entry is checked before the file is created, so a rejected matrix
/// never leaves a partial file behind.
pub fn write_activation_shard(path: impl AsRef<Path>, rows: ArrayView2<f32>) -> Result<()> {
    let path = path.as_ref();
    let (n_rows, d_model) = rows.dim();
    if d_model == 0 {
        return Err(Error::InvalidInput("d_model must be at least 1".into()));
    }
    if let Some(((r, c), v)) = rows.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("row {r}, column {c} is {v}")));
    }
    let header = ActsHeader {
        d_model,
        n_rows: n_rows as u64,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&header.encode()).map_err(|e| Error::io(path, e))?;
    for v in rows.iter() {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a whole `.acts` shard into memory.
pub fn read_activation_shard(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let reader = ActivationShardReader::open(path)?;
    reader.read_rows(0, reader.n_rows() as usize)
}

/// Random-access reader over one `.acts` shard.
///
/// Uses positional reads, so a reader can be shared between threads.
#[derive(Debug)]
pub struct ActivationShardReader {
    path: PathBuf,
    file: File,
    header: ActsHeader,
}

impl ActivationShardReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut buf = [0u8; ACTS_HEADER_LEN as usize];
        file.read_exact_at(&mut buf, 0).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format(format!("{}: truncated header", path.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
        let header = ActsHeader::decode(&buf, &path)?;
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let expected = ACTS_HEADER_LEN + header.payload_len();
        if len != expected {
            return Err(Error::Format(format!(
                "{}: file is {len} bytes, header implies {expected}",
                path.display()
            )));
        }
        Ok(Self { path, file, header })
    }

    pub fn header(&self) -> ActsHeader {
        self.header
    }

    pub fn d_model(&self) -> usize {
        self.header.d_model
    }

    pub fn n_rows(&self) -> u64 {
        self.header.n_rows
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Read `count` rows starting at `start`.
    pub fn read_rows(&self, start: usize, count: usize) -> Result<Array2<f32>> {
        let d = self.header.d_model;
        if (start + count) as u64 > self.header.n_rows {
            return Err(Error::InvalidInput(format!(
                "{}: rows {start}..{} out of range ({} rows)",
                self.path.display(),
                start + count,
                self.header.n_rows
            )));
        }
        let mut bytes = vec![0u8; count * d * 4];
        let offset = ACTS_HEADER_LEN + (start * d * 4) as u64;
        self.file
            .read_exact_at(&mut bytes, offset)
            .map_err(|e| Error::io(&self.path, e))?;
        let mut values = Vec::with_capacity(count * d);
        for chunk in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Format(format!(
                    "{}: non-finite value in payload",
                    self.path.display()
                )));
            }
            values.push(v);
        }
        Ok(Array2::from_shape_vec((count, d), values).expect("shape checked above"))
    }
}

// ---------------------------------------------------------------------------
// Token shards
// ---------------------------------------------------------------------------

/// Token ids grouped into sequences.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenShard {
    pub seq_lengths: Vec<u32>,
    pub tokens: Vec<u32>,
}

impl TokenShard {
    pub fn from_sequences<I, S>(seqs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u32]>,
    {
        let mut shard = TokenShard::default();
        for s in seqs {
            let s = s.as_ref();
            shard.seq_lengths.push(s.len() as u32);
            shard.tokens.extend_from_slice(s);
        }
        shard
    }

    pub fn n_seqs(&self) -> usize {
        self.seq_lengths.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Iterate sequences as slices, in file order.
    pub fn sequences(&self) -> impl Iterator<Item = &[u32]> + '_ {
        let mut offset = 0usize;
        self.seq_lengths.iter().map(move |&len| {
            let s = &self.tokens[offset..offset + len as usize];
            offset += len as usize;
            s
        })
    }

    /// Start offset of every sequence within `tokens`.
    pub fn sequence_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.seq_lengths.len());
        let mut offset = 0usize;
        for &len in &self.seq_lengths {
            out.push(offset);
            offset += len as usize;
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.seq_lengths.iter().any(|&l| l == 0) {
            return Err(Error::InvalidInput("sequence lengths must be positive".into()));
        }
        let total: u64 = self.seq_lengths.iter().map(|&l| l as u64).sum();
        if total != self.tokens.len() as u64 {
            return Err(Error::InvalidInput(format!(
                "sequence lengths sum to {total}, but {} tokens present",
                self.tokens.len()
            )));
        }
        Ok(())
    }
}

pub fn write_token_shard(path: impl AsRef<Path>, shard: &TokenShard) -> Result<()> {
    let path = path.as_ref();
    shard.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(&TOKS_MAGIC)?;
    put(&FORMAT_VERSION.to_le_bytes())?;
    put(&(shard.seq_lengths.len() as u32).to_le_bytes())?;
    for l in &shard.seq_lengths {
        put(&l.to_le_bytes())?;
    }
    put(&(shard.tokens.len() as u64).to_le_bytes())?;
    for t in &shard.tokens {
        put(&t.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_token_shard(path: impl AsRef<Path>) -> Result<TokenShard> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let truncated = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("{}: truncated token shard", path.display()))
        } else {
            Error::io(path, e)
        }
    };
    let mut u32buf = [0u8; 4];
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != TOKS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:02x?}, expected XTOK",
            path.display()
        )));
    }
    r.read_exact(&mut u32buf).map_err(truncated)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    r.read_exact(&mut u32buf).map_err(truncated)?;
    let n_seqs = u32::from_le_bytes(u32buf) as usize;
    let mut seq_lengths = Vec::with_capacity(n_seqs);
    for _ in 0..n_seqs {
        r.read_exact(&mut u32buf).map_err(truncated)?;
        seq_lengths.push(u32::from_le_bytes(u32buf));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(truncated)?;
    let n_tokens = u64::from_le_bytes(u64buf) as usize;
    let mut bytes = vec![0u8; n_tokens * 4];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            rest.len()
        )));
    }
    let tokens = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let shard = TokenShard {
        seq_lengths,
        tokens,
    };
    shard
        .validate()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(shard)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub step: u64,
    pub activation_shard_paths: Vec<PathBuf>,
    pub norm_scalar: f64,
}

/// Registry of snapshots and their shards, stored as `manifest.json`.
///
/// Relative shard paths are resolved against the manifest's directory.
/// Unknown JSON fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub d_model: usize,
    pub snapshots: Vec<SnapshotEntry>,
    #[serde(default)]
    pub token_shard_paths: Vec<PathBuf>,
    #[serde(default)]
    pub tokenizer_name: String,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl SnapshotManifest {
    pub fn new(d_model: usize, snapshots: Vec<SnapshotEntry>) -> Self {
        Self {
            d_model,
            snapshots,
            token_shard_paths: Vec::new(),
            tokenizer_name: String::new(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: SnapshotManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate_static()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Directory that relative shard paths are resolved against.
    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = dir.into();
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn steps(&self) -> Vec<u64> {
        self.snapshots.iter().map(|s| s.step).collect()
    }

    pub fn norm_scalars(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.norm_scalar).collect()
    }

    pub fn n_snapshots(&self) -> usize {
        self.snapshots.len()
    }

    pub fn activation_paths(&self, snapshot: usize) -> Vec<PathBuf> {
        self.snapshots[snapshot]
            .activation_shard_paths
            .iter()
            .map(|p| self.resolve(p))
            .collect()
    }

    pub fn token_paths(&self) -> Vec<PathBuf> {
        self.token_shard_paths.iter().map(|p| self.resolve(p)).collect()
    }

    /// Checks that need no file access.
    pub fn validate_static(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::InvalidInput("manifest d_model must be positive".into()));
        }
        if self.snapshots.is_empty() {
            return Err(Error::InvalidInput("manifest lists no snapshots".into()));
        }
        for w in self.snapshots.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::InvalidInput(format!(
                    "snapshot steps must be strictly increasing ({} then {})",
                    w[0].step, w[1].step
                )));
            }
        }
        for s in &self.snapshots {
            if !(s.norm_scalar > 0.0 && s.norm_scalar.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "snapshot {}: norm_scalar must be positive, got {}",
                    s.step, s.norm_scalar
                )));
            }
        }
        let n_shards = self.snapshots[0].activation_shard_paths.len();
        if let Some(s) = self
            .snapshots
            .iter()
            .find(|s| s.activation_shard_paths.len() != n_shards)
        {
            return Err(Error::Alignment(format!(
                "snapshot {} lists {} shards, snapshot {} lists {n_shards}",
                s.step,
                s.activation_shard_paths.len(),
                self.snapshots[0].step
            )));
        }
        Ok(())
    }

    /// Full validation: opens every shard header and checks row alignment.
    /// Returns the row count of every shard index.
    pub fn validate(&self) -> Result<Vec<u64>> {
        self.validate_static()?;
        let all: Vec<usize> = (0..self.n_snapshots()).collect();
        let readers = self.open_readers(&all)?;
        Ok(readers[0].iter().map(|r| r.n_rows()).collect())
    }

    pub fn n_rows(&self) -> Result<u64> {
        Ok(self.validate()?.iter().sum())
    }

    fn open_readers(&self, subset: &[usize]) -> Result<Vec<Vec<ActivationShardReader>>> {
        let mut readers = Vec::with_capacity(subset.len());
        for &s in subset {
            let entry = self.snapshots.get(s).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "snapshot index {s} out of range ({} snapshots)",
                    self.snapshots.len()
                ))
            })?;
            let mut shard_readers = Vec::with_capacity(entry.activation_shard_paths.len());
            for p in &entry.activation_shard_paths {
                let r = ActivationShardReader::open(self.resolve(p))?;
                if r.d_model() != self.d_model {
                    return Err(Error::Shape(format!(
                        "{}: d_model {} but manifest says {}",
                        r.path().display(),
                        r.d_model(),
                        self.d_model
                    )));
                }
                shard_readers.push(r);
            }
            readers.push(shard_readers);
        }
        for (k, shard_readers) in readers.iter().enumerate().skip(1) {
            for (j, r) in shard_readers.iter().enumerate() {
                let expected = readers[0][j].n_rows();
                if r.n_rows() != expected {
                    return Err(Error::Alignment(format!(
                        "shard {j}: snapshot {} has {} rows, snapshot {} has {expected}",
                        self.snapshots[subset[k]].step,
                        r.n_rows(),
                        self.snapshots[subset[0]].step
                    )));
                }
            }
        }
        Ok(readers)
    }
}

// ---------------------------------------------------------------------------
// Aligned batch streaming
// ---------------------------------------------------------------------------

/// One batch of rows, aligned across snapshots: row `r` of every matrix
/// belongs to the same token.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedBatch {
    /// Global row index (over the concatenated shards) of the first row.
    pub start_row: u64,
    pub snapshots: Vec<Array2<f32>>,
}

impl AlignedBatch {
    pub fn n_rows(&self) -> usize {
        self.snapshots.first().map_or(0, |m| m.nrows())
    }

    pub fn views(&self) -> Vec<ArrayView2<'_, f32>> {
        self.snapshots.iter().map(|m| m.view()).collect()
    }

    /// Concatenate batches (assumed contiguous) into one.
    pub fn concat(batches: &[AlignedBatch]) -> Option<AlignedBatch> {
        let first = batches.first()?;
        let n_snap = first.snapshots.len();
        let snapshots = (0..n_snap)
            .map(|s| {
                let views: Vec<_> = batches.iter().map(|b| b.snapshots[s].view()).collect();
                ndarray::concatenate(Axis(0), &views).expect("equal widths")
            })
            .collect();
        Some(AlignedBatch {
            start_row: first.start_row,
            snapshots,
        })
    }
}

/// Streams aligned batches from a manifest; rows are multiplied by their
/// snapshot's `norm_scalar`.
#[derive(Debug)]
pub struct BatchStream {
    readers: Vec<Vec<ActivationShardReader>>,
    scalars: Vec<f32>,
    shard_starts: Vec<u64>,
    total_rows: u64,
    batch_size: usize,
    next_row: u64,
}

/// Open an aligned batch stream over `snapshot_subset` (indices into the
/// manifest's snapshot list).
pub fn read_activation_batches(
    manifest: &SnapshotManifest,
    snapshot_subset: &[usize],
    batch_size: usize,
) -> Result<BatchStream> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be at least 1".into()));
    }
    if snapshot_subset.is_empty() {
        return Err(Error::InvalidInput("no snapshots requested".into()));
    }
    manifest.validate_static()?;
    let readers = manifest.open_readers(snapshot_subset)?;
    let mut shard_starts = Vec::with_capacity(readers[0].len() + 1);
    let mut acc = 0u64;
    for r in &readers[0] {
        shard_starts.push(acc);
        acc += r.n_rows();
    }
    shard_starts.push(acc);
    Ok(BatchStream {
        scalars: snapshot_subset
            .iter()
            .map(|&s| manifest.snapshots[s].norm_scalar as f32)
            .collect(),
        readers,
        shard_starts,
        total_rows: acc,
        batch_size,
        next_row: 0,
    })
}

impl BatchStream {
    pub fn total_rows(&self) -> u64 {
        self.total_rows
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn n_batches(&self) -> u64 {
        self.total_rows.div_ceil(self.batch_size as u64)
    }

    /// Position the stream so the next batch starts at `row`.
    pub fn seek(&mut self, row: u64) {
        self.next_row = row.min(self.total_rows);
    }

    /// Read an arbitrary aligned row range.
    pub fn read_range(&self, start: u64, count: usize) -> Result<AlignedBatch> {
        if start + count as u64 > self.total_rows {
            return Err(Error::InvalidInput(format!(
                "rows {start}..{} out of range ({} rows)",
                start + count as u64,
                self.total_rows
            )));
        }
        let d = self.readers[0].first().map_or(0, |r| r.d_model());
        let mut snapshots = Vec::with_capacity(self.readers.len());
        for (k, shard_readers) in self.readers.iter().enumerate() {
            let mut out = Array2::<f32>::zeros((count, d));
            let mut filled = 0usize;
            let mut row = start;
            while filled < count {
                let shard = self.shard_starts.partition_point(|&s| s <= row) - 1;
                let local = (row - self.shard_starts[shard]) as usize;
                let available = (self.shard_starts[shard + 1] - row) as usize;
                let take = available.min(count - filled);
                let block = shard_readers[shard].read_rows(local, take)?;
                out.slice_mut(ndarray::s![filled..filled + take, ..])
                    .assign(&block);
                filled += take;
                row += take as u64;
            }
            let scale = self.scalars[k];
            if scale != 1.0 {
                out.mapv_inplace(|v| v * scale);
            }
            snapshots.push(out);
        }
        Ok(AlignedBatch {
            start_row: start,
            snapshots,
        })
    }
}

impl Iterator for BatchStream {
    type Item = Result<AlignedBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_row >= self.total_rows {
            return None;
        }
        let count = (self.total_rows - self.next_row).min(self.batch_size as u64) as usize;
        let start = self.next_row;
        self.next_row += count as u64;
        Some(self.read_range(start, count))
    }
}

/// Read every row of the requested snapshots into a single batch.
pub fn read_all(manifest: &SnapshotManifest, snapshot_subset: &[usize]) -> Result<AlignedBatch> {
    let stream = read_activation_batches(manifest, snapshot_subset, 1)?;
    stream.read_range(0, stream.total_rows() as usize)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Scalar `s` such that scaled rows have mean L2 norm `sqrt(d_model)`:
/// `s = sqrt(d_model) / mean(||a||)`.
pub fn compute_norm_scalar(shard_paths: &[PathBuf], d_model: usize) -> Result<f64> {
    const CHUNK: usize = 4096;
    let mut sum = 0.0f64;
    let mut count = 0u64;
    for p in shard_paths {
        let r = ActivationShardReader::open(p)?;
        if r.d_model() != d_model {
            return Err(Error::Shape(format!(
                "{}: d_model {} but expected {d_model}",
                p.display(),
                r.d_model()
            )));
        }
        let n = r.n_rows() as usize;
        let mut start = 0;
        while start < n {
            let take = CHUNK.min(n - start);
            let block = r.read_rows(start, take)?;
            for row in block.rows() {
                sum += row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            }
            count += take as u64;
            start += take;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no rows to normalize".into()));
    }
    let mean = sum / count as f64;
    if mean == 0.0 {
        return Err(Error::Degenerate(
            "all rows are zero; normalization scalar undefined".into(),
        ));
    }
    Ok((d_model as f64).sqrt() / mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_matrix_payload_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.acts");
        write_activation_shard(&p, Array2::<f32>::zeros((2, 3)).view()).unwrap();
        // Six f32 values after the header.
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 24 + 24);
    }

    #[test]
    fn one_by_one_header_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.acts");
        write_activation_shard(&p, array![[1.5f32]].view()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        // Hand-written expectation of the 28-byte file.
        let mut expected = vec![0x58, 0x41, 0x43, 0x54];
        expected.extend([1, 0, 0, 0]);
        expected.extend([1, 0, 0, 0]);
        expected.extend([0, 0, 0, 0]);
        expected.extend([1, 0, 0, 0, 0, 0, 0, 0]);
        expected.extend(1.5f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn non_finite_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.acts");
        let err = write_activation_shard(&p, array![[1.0f32, f32::NAN]].view()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(!p.exists());
    }

    #[test]
    fn corrupt_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.acts");
        write_activation_shard(&p, array![[1.0f32, 2.0]].view()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'Y';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(ActivationShardReader::open(&p), Err(Error::Format(_))));
        bytes[0] = b'X';
        bytes[4] = 2;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(ActivationShardReader::open(&p), Err(Error::Format(_))));
        bytes[4] = 1;
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(ActivationShardReader::open(&p), Err(Error::Format(_))));
    }

    #[test]
    fn token_shard_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.toks");
        let shard = TokenShard::from_sequences([vec![7u32, 8], vec![9]]);
        write_token_shard(&p, &shard).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], b"XTOK");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // magic + version + n_seqs + 2 lengths + n_tokens + 3 ids
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 8 + 12);
        assert_eq!(read_token_shard(&p).unwrap(), shard);
        let seqs: Vec<&[u32]> = shard.sequences().collect();
        assert_eq!(seqs, vec![&[7u32, 8][..], &[9][..]]);
    }

    #[test]
    fn token_shard_rejects_zero_length_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let shard = TokenShard {
            seq_lengths: vec![0],
            tokens: vec![],
        };
        assert!(write_token_shard(dir.path().join("t.toks"), &shard).is_err());
    }

    #[test]
    fn norm_scalar_fixed_points() {
        let dir = tempfile::tempdir().unwrap();
        let d = 4usize;
        // Each row has norm sqrt(d) = 2.
        let rows = array![[2.0f32, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]];
        let p = dir.path().join("a.acts");
        write_activation_shard(&p, rows.view()).unwrap();
        let s = compute_norm_scalar(&[p.clone()], d).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        write_activation_shard(&p, (rows * 2.0).view()).unwrap();
        let s = compute_norm_scalar(&[p.clone()], d).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
        write_activation_shard(&p, Array2::<f32>::zeros((3, d)).view()).unwrap();
        assert!(matches!(
            compute_norm_scalar(&[p], d),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn manifest_rejects_unordered_steps_and_bad_scalar() {
        let entry = |step, s| SnapshotEntry {
            step,
            activation_shard_paths: vec![],
            norm_scalar: s,
        };
        let m = SnapshotManifest::new(4, vec![entry(10, 1.0), entry(10, 1.0)]);
        assert!(m.validate_static().is_err());
        let m = SnapshotManifest::new(4, vec![entry(0, 1.0), entry(10, 0.0)]);
        assert!(m.validate_static().is_err());
        let m = SnapshotManifest::new(4, vec![entry(0, 1.0), entry(10, 2.0)]);
        assert!(m.validate_static().is_ok());
    }

    #[test]
    fn manifest_ignores_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        std::fs::write(
            &p,
            r#"{"d_model": 2, "extra": [1,2],
                "snapshots": [{"step": 0, "activation_shard_paths": ["a.acts"], "norm_scalar": 1.0, "note": "x"}]}"#,
        )
        .unwrap();
        let m = SnapshotManifest::load(&p).unwrap();
        assert_eq!(m.activation_paths(0), vec![dir.path().join("a.acts")]);
        assert!(m.token_shard_paths.is_empty());
    }
}
