//! Seeded synthetic near-duplicate benchmark.
//!
//! Each cluster owns a prototype: a few latent "scenes" laid out as
//! contiguous shots over `frames_per_video` frames. Member 0 of a cluster is
//! the prototype itself; the other members are temporally subsampled
//! (stride 1 or 2) and lose up to 20% of their frames. Every member then
//! receives independent Gaussian noise of standard deviation `noise` on each
//! feature coordinate. The conv-level channel maxima are a fixed random
//! non-negative projection of the same latent frame, rescaled to unit norm
//! so that `noise` means the same relative corruption at every level.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::GroundTruth;
use crate::error::{NdvrError, Result};
use crate::feature_store::{FrameFeature, VideoFeatures};

/// Frame rate of every prototype.
pub const SYNTH_FPS: f64 = 20.0;
const MAX_DROPOUT: f64 = 0.2;
const SCENE_JITTER: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub num_clusters: usize,
    pub videos_per_cluster: usize,
    pub frames_per_video: usize,
    pub dims: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            num_clusters: 20,
            videos_per_cluster: 5,
            frames_per_video: 60,
            dims: 64,
            noise: 0.1,
            seed: 7,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_clusters", self.num_clusters),
            ("videos_per_cluster", self.videos_per_cluster),
            ("frames_per_video", self.frames_per_video),
            ("dims", self.dims),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(NdvrError::Parameter(format!("{name} must be at least 1")));
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(NdvrError::Parameter(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    /// Channel counts of the two synthetic conv layers.
    pub fn layer_dims(&self) -> Vec<usize> {
        vec![(self.dims / 2).max(1), self.dims]
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub videos: Vec<VideoFeatures>,
    /// One query per cluster: member 0 against every other video.
    pub truths: Vec<GroundTruth>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Latent per-frame vectors of one prototype.
fn prototype(rng: &mut ChaCha8Rng, frames: usize, dims: usize) -> Vec<Vec<f64>> {
    let scenes: Vec<Vec<f64>> = (0..rng.random_range(2..=4usize))
        .map(|_| unit(gaussian(rng, dims)))
        .collect();
    let mut cuts: Vec<usize> = (0..scenes.len() - 1)
        .map(|_| rng.random_range(1..frames.max(2)))
        .collect();
    cuts.sort_unstable();
    (0..frames)
        .map(|f| {
            let scene = &scenes[cuts.iter().filter(|&&c| c <= f).count()];
            let jitter = gaussian(rng, dims);
            unit(scene.iter().zip(jitter).map(|(s, j)| s + SCENE_JITTER * j).collect())
        })
        .collect()
}

struct Projection {
    /// Row-major `out x dims`.
    weights: Vec<f64>,
    out: usize,
}

impl Projection {
    fn new(rng: &mut ChaCha8Rng, out: usize, dims: usize) -> Self {
        Self { weights: gaussian(rng, out * dims), out }
    }

    /// Rectified projection scaled to unit norm, like the fc latent.
    fn apply(&self, z: &[f64]) -> Vec<f64> {
        unit(
            self.weights
                .chunks_exact(z.len())
                .take(self.out)
                .map(|row| (row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()).max(0.0))
                .collect(),
        )
    }
}

fn noisy(rng: &mut ChaCha8Rng, clean: &[f64], noise: f64) -> Vec<f32> {
    clean
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(rng);
            (x + noise * e) as f32
        })
        .collect()
}

pub fn synth_dataset(params: &SynthParams) -> Result<SynthDataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let projections: Vec<Projection> = params
        .layer_dims()
        .into_iter()
        .map(|out| Projection::new(&mut rng, out, params.dims))
        .collect();

    let total = params.num_clusters * params.videos_per_cluster;
    let mut numbering: Vec<usize> = (0..total).collect();
    numbering.shuffle(&mut rng);
    let id_of = |cluster: usize, member: usize| format!("vid{:04}", numbering[cluster * params.videos_per_cluster + member]);

    let mut videos = Vec::with_capacity(total);
    for cluster in 0..params.num_clusters {
        let latent = prototype(&mut rng, params.frames_per_video, params.dims);
        for member in 0..params.videos_per_cluster {
            let (stride, dropout) = if member == 0 {
                (1, 0.0)
            } else {
                (rng.random_range(1..=2usize), rng.random_range(0.0..MAX_DROPOUT))
            };
            let fps = SYNTH_FPS / stride as f64;
            let mut kept: Vec<usize> = (0..params.frames_per_video)
                .step_by(stride)
                .filter(|_| !rng.random_bool(dropout))
                .collect();
            if kept.is_empty() {
                kept.push(0);
            }
            let frames = kept
                .into_iter()
                .map(|f| {
                    let z = &latent[f];
                    let fc = noisy(&mut rng, z, params.noise);
                    let conv = projections
                        .iter()
                        .map(|p| noisy(&mut rng, &p.apply(z), params.noise))
                        .collect();
                    FrameFeature::new((f / stride) as u32, fps, fc, conv)
                })
                .collect();
            videos.push(VideoFeatures::new(id_of(cluster, member), fps, frames)?);
        }
    }

    let all_ids: Vec<String> = videos.iter().map(|v| v.video_id.clone()).collect();
    let truths = (0..params.num_clusters)
        .map(|cluster| {
            let query = id_of(cluster, 0);
            GroundTruth {
                relevant: (1..params.videos_per_cluster).map(|m| id_of(cluster, m)).collect(),
                gallery: all_ids.iter().filter(|id| **id != query).cloned().collect(),
                query_id: query,
            }
        })
        .collect();

    Ok(SynthDataset { videos, truths })
}
