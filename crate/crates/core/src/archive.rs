//! On-disk containers between pipeline stages: the feature archive
//! (record id → raw log-mel matrix), standalone normalization stats, and
//! the embedding table (record id → embedding vector).
//!
//! All three are little-endian binary files with an 8-byte magic and a
//! version word; loaders reject unknown versions and trailing bytes.
//! Feature matrices are stored as 32-bit floats (and re-quantize to the
//! same bits on re-save, so save→load→save is byte-identical); stats and
//! embeddings stay in 64-bit.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array1, Array2};

use crate::dsp::{CmvnStats, FeatureConfig, FeatureMatrix, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::ioutil::{BinReader, BinWriter};
use crate::manifest::SegmentKind;

pub const FEATURE_MAGIC: &[u8; 8] = b"SEGFEAT0";
pub const FEATURE_VERSION: u32 = 1;
pub const CMVN_MAGIC: &[u8; 8] = b"SEGCMVN0";
pub const CMVN_VERSION: u32 = 1;
pub const EMBED_MAGIC: &[u8; 8] = b"SEGEMB00";
pub const EMBED_VERSION: u32 = 1;

fn kind_code(kind: SegmentKind) -> u8 {
    match kind {
        SegmentKind::C => 0,
        SegmentKind::Cv => 1,
    }
}

fn kind_from_code(code: u8) -> Option<SegmentKind> {
    match code {
        0 => Some(SegmentKind::C),
        1 => Some(SegmentKind::Cv),
        _ => None,
    }
}

/// Unnormalized feature matrices for a corpus, keyed by record id in
/// insertion order.
#[derive(Debug, Clone)]
pub struct FeatureArchive {
    config: FeatureConfig,
    entries: IndexMap<String, Array2<f64>>,
}

impl FeatureArchive {
    pub fn new(config: FeatureConfig) -> Self {
        FeatureArchive {
            config,
            entries: IndexMap::new(),
        }
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, id: &str, fm: &FeatureMatrix) -> Result<()> {
        let fail = |m: String| Err(Error::Feature(format!("archive: {m}")));
        if fm.normalized {
            return fail(format!("record {id}: archives store unnormalized features"));
        }
        if fm.config.content_hash() != self.config.content_hash() {
            return fail(format!(
                "record {id}: feature config differs from the archive's"
            ));
        }
        if fm.data.ncols() != self.config.num_mels {
            return fail(format!(
                "record {id}: {} columns, archive stores {}",
                fm.data.ncols(),
                self.config.num_mels
            ));
        }
        if self.entries.contains_key(id) {
            return fail(format!("duplicate record id {id}"));
        }
        // Quantize to storage precision on the way in, so an archive used
        // in memory hands out exactly the same features as one reloaded
        // from disk.
        self.entries
            .insert(id.to_string(), fm.data.mapv(|v| v as f32 as f64));
        Ok(())
    }

    /// Feature matrix for `id`, tagged with the archive's config.
    pub fn get(&self, id: &str) -> Option<FeatureMatrix> {
        self.entries.get(id).map(|data| FeatureMatrix {
            data: data.clone(),
            config: self.config.clone(),
            normalized: false,
        })
    }

    /// Like `get`, but a missing id is an error naming the record.
    pub fn require(&self, id: &str) -> Result<FeatureMatrix> {
        self.get(id).ok_or_else(|| {
            Error::Feature(format!(
                "archive has no features for record {id} \
                 (was the archive built from the same manifest and speed factors?)"
            ))
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::new(FEATURE_MAGIC, FEATURE_VERSION);
        let cfg = &self.config;
        w.write_f64(cfg.frame_length_ms);
        w.write_f64(cfg.frame_shift_ms);
        w.write_u32(cfg.num_mels as u32);
        w.write_u32(cfg.fft_size as u32);
        w.write_f64(cfg.preemphasis);
        w.write_f64(cfg.low_freq);
        w.write_f64(cfg.high_freq);
        w.write_f64(cfg.log_floor);
        w.write_u64(cfg.content_hash());
        w.write_u64(self.entries.len() as u64);
        for (id, data) in &self.entries {
            w.write_string(id);
            w.write_u64(data.nrows() as u64);
            let quantized: Vec<f32> = data.iter().map(|&v| v as f32).collect();
            w.write_f32_slice(&quantized);
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::open(path)?;
        r.expect_magic(FEATURE_MAGIC, "feature archive")?;
        r.expect_version(FEATURE_VERSION)?;
        let config = FeatureConfig {
            frame_length_ms: r.read_f64("frame_length_ms")?,
            frame_shift_ms: r.read_f64("frame_shift_ms")?,
            num_mels: r.read_u32("num_mels")? as usize,
            fft_size: r.read_u32("fft_size")? as usize,
            preemphasis: r.read_f64("preemphasis")?,
            low_freq: r.read_f64("low_freq")?,
            high_freq: r.read_f64("high_freq")?,
            log_floor: r.read_f64("log_floor")?,
        };
        let stored_hash = r.read_u64("config hash")?;
        if stored_hash != config.content_hash() {
            return r.fail("config hash disagrees with stored config fields");
        }
        let count = r.read_u64("record count")? as usize;
        let mut entries = IndexMap::with_capacity(count);
        for _ in 0..count {
            let id = r.read_string("record id")?;
            let frames = r.read_u64("frame count")? as usize;
            let flat = r.read_f32_vec(frames * config.num_mels, "feature data")?;
            let data = Array2::from_shape_vec(
                (frames, config.num_mels),
                flat.into_iter().map(f64::from).collect(),
            );
            let data = match data {
                Ok(d) => d,
                Err(_) => return r.fail(format!("record {id}: bad matrix shape")),
            };
            if entries.insert(id.clone(), data).is_some() {
                return r.fail(format!("duplicate record id {id}"));
            }
        }
        r.expect_eof()?;
        Ok(FeatureArchive { config, entries })
    }
}

pub fn save_cmvn(stats: &CmvnStats, path: &Path) -> Result<()> {
    let mut w = BinWriter::new(CMVN_MAGIC, CMVN_VERSION);
    w.write_u32(stats.mean.len() as u32);
    w.write_u64(stats.frame_count);
    w.write_f64_slice(stats.mean.as_slice().expect("contiguous"));
    w.write_f64_slice(stats.variance.as_slice().expect("contiguous"));
    w.save(path)
}

pub fn load_cmvn(path: &Path) -> Result<CmvnStats> {
    let mut r = BinReader::open(path)?;
    r.expect_magic(CMVN_MAGIC, "normalization stats")?;
    r.expect_version(CMVN_VERSION)?;
    let dim = r.read_u32("dimension")? as usize;
    let frame_count = r.read_u64("frame count")?;
    let mean = Array1::from_vec(r.read_f64_vec(dim, "means")?);
    let variance = Array1::from_vec(r.read_f64_vec(dim, "variances")?);
    r.expect_eof()?;
    if frame_count < 2 {
        return r.fail(format!("frame count {frame_count} below 2"));
    }
    if mean.iter().any(|v| !v.is_finite())
        || variance.iter().any(|v| !v.is_finite() || *v < VARIANCE_FLOOR)
    {
        return r.fail("stats must be finite with variances at or above the floor");
    }
    Ok(CmvnStats {
        mean,
        variance,
        frame_count,
    })
}

/// Fixed-dimension embeddings for a corpus, keyed by record id in
/// insertion order.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub kind: SegmentKind,
    dim: usize,
    entries: IndexMap<String, Array1<f64>>,
}

impl EmbeddingTable {
    pub fn new(kind: SegmentKind, dim: usize) -> Self {
        EmbeddingTable {
            kind,
            dim,
            entries: IndexMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: &str, embedding: Array1<f64>) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::Model(format!(
                "embedding for {id} has dimension {}, table stores {}",
                embedding.len(),
                self.dim
            )));
        }
        if !embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::Model(format!("embedding for {id} is not finite")));
        }
        if self.entries.insert(id.to_string(), embedding).is_some() {
            return Err(Error::Model(format!("duplicate embedding id {id}")));
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Array1<f64>> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array1<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::new(EMBED_MAGIC, EMBED_VERSION);
        w.write_u8(kind_code(self.kind));
        w.write_u32(self.dim as u32);
        w.write_u64(self.entries.len() as u64);
        for (id, e) in &self.entries {
            w.write_string(id);
            w.write_f64_slice(e.as_slice().expect("contiguous"));
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::open(path)?;
        r.expect_magic(EMBED_MAGIC, "embedding table")?;
        r.expect_version(EMBED_VERSION)?;
        let code = r.read_u8("segment kind")?;
        let kind = match kind_from_code(code) {
            Some(k) => k,
            None => return r.fail(format!("unknown segment kind code {code}")),
        };
        let dim = r.read_u32("dimension")? as usize;
        let count = r.read_u64("record count")? as usize;
        let mut entries = IndexMap::with_capacity(count);
        for _ in 0..count {
            let id = r.read_string("record id")?;
            let e = Array1::from_vec(r.read_f64_vec(dim, "embedding")?);
            if entries.insert(id.clone(), e).is_some() {
                return r.fail(format!("duplicate embedding id {id}"));
            }
        }
        r.expect_eof()?;
        Ok(EmbeddingTable { kind, dim, entries })
    }
}
