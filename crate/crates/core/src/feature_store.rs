//! The `NDVF` per-video feature container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "NDVF" | 0x01 | u32 header_len | JSON header
//! header = {video_id, fps, frame_count, fc_dim, layer_dims: [c1..cL]}
//! per frame: u32 frame_index | f64 timestamp | fc_dim x f32 | c1 x f32 | ... | cL x f32
//! ```
//!
//! Conv layers are stored already max-pooled over their spatial extent, one
//! value per channel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{Reader, Writer};
use crate::error::{NdvrError, Result};

pub const MAGIC: &[u8; 4] = b"NDVF";

/// File extension used for feature containers inside a dataset directory.
pub const EXTENSION: &str = "ndvf";

/// Relative tolerance for `timestamp == frame_index / fps`.
const TIMESTAMP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeature {
    pub frame_index: u32,
    pub timestamp: f64,
    /// Fully-connected layer output.
    pub fc_vector: Vec<f32>,
    /// Channel maxima of each conv layer, in network order.
    pub conv_vectors: Vec<Vec<f32>>,
}

impl FrameFeature {
    pub fn new(frame_index: u32, fps: f64, fc_vector: Vec<f32>, conv_vectors: Vec<Vec<f32>>) -> Self {
        Self {
            frame_index,
            timestamp: f64::from(frame_index) / fps,
            fc_vector,
            conv_vectors,
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.conv_vectors.iter().map(Vec::len).collect()
    }
}

/// All sampled frames of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    pub fps: f64,
    pub frames: Vec<FrameFeature>,
}

impl VideoFeatures {
    /// Builds and validates.
    pub fn new(video_id: impl Into<String>, fps: f64, frames: Vec<FrameFeature>) -> Result<Self> {
        let v = Self {
            video_id: video_id.into(),
            fps,
            frames,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Length of the video in seconds, `n / fps`.
    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.fps
    }

    pub fn fc_dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.fc_vector.len())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.frames.first().map_or_else(Vec::new, FrameFeature::layer_dims)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(NdvrError::Validation(format!(
                "fps must be positive and finite, got {}",
                self.fps
            )));
        }
        let fc_dim = self.fc_dim();
        let layer_dims = self.layer_dims();
        let mut previous: Option<u32> = None;
        for frame in &self.frames {
            if let Some(p) = previous {
                if frame.frame_index <= p {
                    return Err(NdvrError::Validation(format!(
                        "frame_index {} does not increase after {p}",
                        frame.frame_index
                    )));
                }
            }
            previous = Some(frame.frame_index);

            let expected = f64::from(frame.frame_index) / self.fps;
            if !frame.timestamp.is_finite()
                || (frame.timestamp - expected).abs() > TIMESTAMP_TOLERANCE * expected.max(1.0)
            {
                return Err(NdvrError::Validation(format!(
                    "frame {} has timestamp {} but frame_index / fps = {expected}",
                    frame.frame_index, frame.timestamp
                )));
            }
            if frame.fc_vector.len() != fc_dim || frame.layer_dims() != layer_dims {
                return Err(NdvrError::Validation(format!(
                    "frame {} dimensions ({}, {:?}) differ from ({fc_dim}, {layer_dims:?})",
                    frame.frame_index,
                    frame.fc_vector.len(),
                    frame.layer_dims()
                )));
            }
            let finite = frame.fc_vector.iter().all(|x| x.is_finite())
                && frame.conv_vectors.iter().flatten().all(|x| x.is_finite());
            if !finite {
                return Err(NdvrError::Validation(format!(
                    "frame {} contains non-finite values",
                    frame.frame_index
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    video_id: String,
    fps: f64,
    frame_count: u64,
    fc_dim: usize,
    layer_dims: Vec<usize>,
}

/// Serializes `video` as an NDVF container and returns the number of bytes written.
pub fn write_features<W: Write>(video: &VideoFeatures, destination: W) -> Result<u64> {
    video.validate()?;
    let header = Header {
        video_id: video.video_id.clone(),
        fps: video.fps,
        frame_count: video.frames.len() as u64,
        fc_dim: video.fc_dim(),
        layer_dims: video.layer_dims(),
    };
    let mut w = Writer::new(destination);
    w.preamble(MAGIC, &header)?;
    for frame in &video.frames {
        w.u32(frame.frame_index)?;
        w.f64(frame.timestamp)?;
        w.f32s(&frame.fc_vector)?;
        for layer in &frame.conv_vectors {
            w.f32s(layer)?;
        }
    }
    w.finish()
}

pub fn read_features<R: Read>(source: R) -> Result<VideoFeatures> {
    let mut r = Reader::new(source, "NDVF container");
    let header: Header = r.preamble(MAGIC)?;
    let mut frames = Vec::new();
    for i in 0..header.frame_count {
        let ctx = format!("frame {i}");
        let frame_index = r.u32(&ctx)?;
        let timestamp = r.f64(&ctx)?;
        let fc_vector = r.f32s(header.fc_dim, &ctx)?;
        let conv_vectors = header
            .layer_dims
            .iter()
            .map(|&c| r.f32s(c, &ctx))
            .collect::<Result<Vec<_>>>()?;
        frames.push(FrameFeature {
            frame_index,
            timestamp,
            fc_vector,
            conv_vectors,
        });
    }
    r.expect_end()?;
    let video = VideoFeatures {
        video_id: header.video_id,
        fps: header.fps,
        frames,
    };
    video.validate()?;
    Ok(video)
}

pub fn write_features_file(video: &VideoFeatures, path: &Path) -> Result<u64> {
    write_features(video, BufWriter::new(File::create(path)?))
}

pub fn read_features_file(path: &Path) -> Result<VideoFeatures> {
    read_features(BufReader::new(File::open(path)?))
}

/// One entry of a dataset manifest (`manifest.json`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub path: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every video as `<dir>/<video_id>.ndvf` plus `manifest.json`.
/// Manifest paths are relative to `dir`.
pub fn write_dataset(dir: &Path, videos: &[VideoFeatures]) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(videos.len());
    for video in videos {
        let id = &video.video_id;
        if id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\']) {
            return Err(NdvrError::Validation(format!("video id `{id}` cannot name a file")));
        }
        let file = PathBuf::from(format!("{id}.{EXTENSION}"));
        write_features_file(video, &dir.join(&file))?;
        manifest.push(ManifestEntry {
            video_id: video.video_id.clone(),
            path: file,
        });
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let bytes = std::fs::read(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads every video listed in the manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<VideoFeatures>> {
    read_manifest(dir)?
        .into_iter()
        .map(|entry| {
            let path = if entry.path.is_absolute() {
                entry.path.clone()
            } else {
                dir.join(&entry.path)
            };
            let video = read_features_file(&path)?;
            if video.video_id != entry.video_id {
                return Err(NdvrError::Validation(format!(
                    "manifest lists {} but {} holds {}",
                    entry.video_id,
                    path.display(),
                    video.video_id
                )));
            }
            Ok(video)
        })
        .collect()
}
