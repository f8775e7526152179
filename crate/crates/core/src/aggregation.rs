//! Per-keyframe descriptors at the two feature levels.
//!
//! The conv level (LLF) concatenates per-layer channel maxima (MAC), removes
//! the vector's own mean and L2-normalizes. The fc level (ULF) is the
//! L2-normalized fully-connected output.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NdvrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureLevel {
    /// Upper-level features from the fully-connected layer.
    Fc,
    /// Low-level features aggregated from intermediate conv layers.
    Conv,
}

impl FeatureLevel {
    pub const ALL: [FeatureLevel; 2] = [FeatureLevel::Fc, FeatureLevel::Conv];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureLevel::Fc => "fc",
            FeatureLevel::Conv => "conv",
        }
    }
}

impl fmt::Display for FeatureLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureLevel {
    type Err = NdvrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" | "ulf" => Ok(FeatureLevel::Fc),
            "conv" | "llf" => Ok(FeatureLevel::Conv),
            other => Err(NdvrError::Parameter(format!("unknown feature level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDescriptor {
    pub level: FeatureLevel,
    /// Unit L2 norm.
    pub vector: Vec<f64>,
}

/// A dense `height x width x channels` activation tensor, channel-fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(NdvrError::Dimension(format!(
                "{height}x{width}x{channels} feature map needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Maximum activation of each channel over all spatial positions.
pub fn mac_pool(map: &FeatureMap) -> Result<Vec<f32>> {
    if map.height == 0 || map.width == 0 || map.channels == 0 {
        return Err(NdvrError::Dimension(format!(
            "cannot pool an empty {}x{}x{} map",
            map.height, map.width, map.channels
        )));
    }
    if map.data.len() != map.height * map.width * map.channels {
        return Err(NdvrError::Dimension("feature map data length disagrees with shape".into()));
    }
    if map.data.iter().any(|v| !v.is_finite()) {
        return Err(NdvrError::Validation("feature map contains non-finite values".into()));
    }
    let mut pooled = map.data[..map.channels].to_vec();
    for pixel in map.data.chunks_exact(map.channels).skip(1) {
        for (best, &v) in pooled.iter_mut().zip(pixel) {
            if v > *best {
                *best = v;
            }
        }
    }
    Ok(pooled)
}

fn normalize(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= 0.0 || norm <= 1e-12 * scale {
        return Err(NdvrError::DegenerateDescriptor(format!("{what} has zero norm")));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Concatenate the per-layer MAC vectors, subtract their mean, L2-normalize.
pub fn build_llf<V: AsRef<[f32]>>(conv_vectors: &[V]) -> Result<FrameDescriptor> {
    if conv_vectors.is_empty() {
        return Err(NdvrError::Dimension("no conv layers to aggregate".into()));
    }
    let mut concat: Vec<f64> = conv_vectors
        .iter()
        .flat_map(|l| l.as_ref().iter().map(|&x| f64::from(x)))
        .collect();
    if concat.is_empty() {
        return Err(NdvrError::Dimension("conv layers are all empty".into()));
    }
    let mean = concat.iter().sum::<f64>() / concat.len() as f64;
    for x in &mut concat {
        *x -= mean;
    }
    Ok(FrameDescriptor {
        level: FeatureLevel::Conv,
        vector: normalize(concat, "centered conv concatenation")?,
    })
}

pub fn build_ulf(fc_vector: &[f32]) -> Result<FrameDescriptor> {
    if fc_vector.is_empty() {
        return Err(NdvrError::Dimension("empty fc vector".into()));
    }
    let v = fc_vector.iter().map(|&x| f64::from(x)).collect();
    Ok(FrameDescriptor {
        level: FeatureLevel::Fc,
        vector: normalize(v, "fc vector")?,
    })
}

/// The conformance fixture shared with feature producers: a tensor and its
/// expected pooled vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacConformance {
    pub input: FeatureMap,
    pub expected: Vec<f32>,
}
