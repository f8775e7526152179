//! Retrieval evaluation: precision/recall curves, average precision, ground
//! truth loading and the synthetic near-duplicate benchmark.

mod metrics;
mod synth;
mod truth;

pub use metrics::{average_precision, mean_ap, precision_recall, write_pr_csv, PrCurve, PrPoint};
pub use synth::{synth_dataset, SynthDataset, SynthParams};
pub use truth::{load_ground_truth, parse_ground_truth, parse_label_map, write_ground_truth, GroundTruth, Relevance};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredVideo {
    pub video_id: String,
    /// Lower is more similar.
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// A ranked gallery for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    pub ranking: Vec<ScoredVideo>,
}

impl RankedResult {
    /// Assigns ranks 1..n in the given order.
    pub fn from_ordered(query_id: impl Into<String>, ordered: Vec<(String, f64)>) -> Self {
        Self {
            query_id: query_id.into(),
            ranking: ordered
                .into_iter()
                .enumerate()
                .map(|(i, (video_id, score))| ScoredVideo {
                    video_id,
                    score,
                    rank: i + 1,
                })
                .collect(),
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ranking.iter().map(|s| s.video_id.as_str())
    }
}
