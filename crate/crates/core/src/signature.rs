//! Reduced keyframe descriptors per video, one set per feature level,
//! persisted as `NDSG` containers.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::FeatureLevel;
use crate::container::{Reader, Writer};
use crate::error::{NdvrError, Result};

pub const MAGIC: &[u8; 4] = b"NDSG";

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSignature {
    pub video_id: String,
    /// One reduced descriptor per keyframe, in keyframe order.
    pub rows: Vec<Vec<f64>>,
}

impl VideoSignature {
    pub fn centroid(&self) -> Result<Vec<f64>> {
        let first = self
            .rows
            .first()
            .ok_or_else(|| NdvrError::EmptySignature(self.video_id.clone()))?;
        let mut c = vec![0.0; first.len()];
        for row in &self.rows {
            for (acc, x) in c.iter_mut().zip(row) {
                *acc += x;
            }
        }
        let n = self.rows.len() as f64;
        c.iter_mut().for_each(|x| *x /= n);
        Ok(c)
    }
}

/// Rounds to the float32 values a signature file would hold.
pub fn to_storage_precision(row: &mut [f64]) {
    row.iter_mut().for_each(|x| *x = f64::from(*x as f32));
}

/// All signatures of one level. Values are held at float32 precision so an
/// in-memory set and its persisted copy are interchangeable.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureSet {
    pub level: FeatureLevel,
    pub dim: usize,
    signatures: Vec<VideoSignature>,
    positions: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    level: FeatureLevel,
    dim: usize,
    videos: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    video_id: String,
    keyframes: usize,
}

impl SignatureSet {
    pub fn new(level: FeatureLevel, dim: usize, mut signatures: Vec<VideoSignature>) -> Result<Self> {
        let mut positions = HashMap::with_capacity(signatures.len());
        for (i, s) in signatures.iter_mut().enumerate() {
            if s.rows.is_empty() {
                return Err(NdvrError::EmptySignature(format!("{} ({level})", s.video_id)));
            }
            for row in &mut s.rows {
                if row.len() != dim {
                    return Err(NdvrError::Dimension(format!(
                        "signature of {} has a {}-dim row, expected {dim}",
                        s.video_id,
                        row.len()
                    )));
                }
                if row.iter().any(|x| !x.is_finite()) {
                    return Err(NdvrError::Validation(format!("non-finite signature entry in {}", s.video_id)));
                }
                to_storage_precision(row);
            }
            if positions.insert(s.video_id.clone(), i).is_some() {
                return Err(NdvrError::Validation(format!("duplicate video id {}", s.video_id)));
            }
        }
        Ok(Self { level, dim, signatures, positions })
    }

    pub fn len(&self) -> usize {
        self.signatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }

    pub fn signatures(&self) -> &[VideoSignature] {
        &self.signatures
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoSignature> {
        self.positions.get(video_id).map(|&i| &self.signatures[i])
    }

    pub fn position(&self, video_id: &str) -> Option<usize> {
        self.positions.get(video_id).copied()
    }

    pub fn ids(&self) -> Vec<String> {
        self.signatures.iter().map(|s| s.video_id.clone()).collect()
    }

    pub fn write<W: Write>(&self, sink: W) -> Result<u64> {
        let header = Header {
            level: self.level,
            dim: self.dim,
            videos: self
                .signatures
                .iter()
                .map(|s| HeaderEntry { video_id: s.video_id.clone(), keyframes: s.rows.len() })
                .collect(),
        };
        let mut w = Writer::new(sink);
        w.preamble(MAGIC, &header)?;
        for s in &self.signatures {
            for row in &s.rows {
                w.f64s_as_f32(row)?;
            }
        }
        w.finish()
    }

    pub fn read<R: Read>(source: R) -> Result<Self> {
        let mut r = Reader::new(source, "signature set");
        let header: Header = r.preamble(MAGIC)?;
        let mut signatures = Vec::with_capacity(header.videos.len());
        for entry in header.videos {
            let rows = (0..entry.keyframes)
                .map(|_| r.f32s_as_f64(header.dim, &entry.video_id))
                .collect::<Result<Vec<_>>>()?;
            signatures.push(VideoSignature { video_id: entry.video_id, rows });
        }
        r.expect_end()?;
        Self::new(header.level, header.dim, signatures).map_err(|e| NdvrError::Corrupt(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<u64> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
