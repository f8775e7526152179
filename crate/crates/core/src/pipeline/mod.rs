//! End-to-end orchestration over an on-disk workspace.
//!
//! ```text
//! <workspace>/
//!   features/   manifest.json, <video_id>.ndvf
//!   keyframes/  keyframes.json
//!   models/     kpca_<level>.model, signatures_<level>.ndsg
//!   index/      index_<level>.ndix, neighbors_<level>.json
//!   results/    results.json, evaluation.json, pr/<level>/<query>.csv
//!   reports/    <stage>.json
//! ```
//!
//! Each stage report records a hash chained from its parent stage's hash,
//! the configuration keys the stage depends on and a digest of any extra
//! input it consumed. A stage refuses to run on top of a missing or stale
//! parent.

mod config;
mod retrieval;
mod stages;

pub use config::{OutputLevel, PipelineConfig};
pub use retrieval::{QueryResult, QuerySpec, ResultsFile};
pub use stages::{
    evaluate, index, ingest, keyframes, query, reduce, run_all, score_results, write_synth, EvaluationFile,
    KeyframesFile, LevelEvaluation, QueryAp, TRUTH_FILE,
};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::aggregation::FeatureLevel;
use crate::error::{NdvrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Keyframes,
    Reduce,
    Index,
    Query,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Keyframes,
        Stage::Reduce,
        Stage::Index,
        Stage::Query,
        Stage::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Keyframes => "keyframes",
            Stage::Reduce => "reduce",
            Stage::Index => "index",
            Stage::Query => "query",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parent(self) -> Option<Stage> {
        match self {
            Stage::Ingest => None,
            Stage::Keyframes => Some(Stage::Ingest),
            Stage::Reduce => Some(Stage::Keyframes),
            Stage::Index => Some(Stage::Reduce),
            Stage::Query => Some(Stage::Index),
            Stage::Evaluate => Some(Stage::Query),
        }
    }

    /// The configuration keys whose values this stage's output depends on.
    fn config_part(self, cfg: &PipelineConfig) -> Value {
        match self {
            Stage::Ingest => serde_json::json!({}),
            Stage::Keyframes => serde_json::json!({ "rate": cfg.rate }),
            Stage::Reduce => serde_json::json!({
                "kpca_dim": cfg.kpca_dim,
                "kpca_sigma": cfg.kpca_sigma,
                "kpca_sample": cfg.kpca_sample,
                "seed": cfg.seed,
            }),
            Stage::Index => serde_json::json!({
                "knn_k": cfg.knn_k,
                "num_trees": cfg.num_trees,
                "leaf_size": cfg.leaf_size,
                "budget": cfg.budget,
                "seed": cfg.seed,
                "sso": cfg.sso_params(),
            }),
            Stage::Query => serde_json::json!({ "levels": cfg.levels }),
            Stage::Evaluate => serde_json::json!({ "label_map": cfg.label_map }),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = NdvrError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| NdvrError::Parameter(format!("unknown stage `{s}`")))
    }
}

/// Written by every stage to `reports/<stage>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub config_hash: String,
    pub parent_hash: Option<String>,
    /// Digest of stage inputs that are not part of the configuration.
    pub input_digest: String,
    pub seconds: f64,
    pub counts: BTreeMap<String, Value>,
    /// Workspace-relative paths of the files the stage wrote.
    pub artifacts: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn chain_hash(parent: Option<&str>, stage: Stage, cfg: &PipelineConfig, input_digest: &str) -> String {
    let mut h = Sha256::new();
    h.update(parent.unwrap_or("").as_bytes());
    h.update(b"\n");
    h.update(stage.as_str().as_bytes());
    h.update(b"\n");
    h.update(stage.config_part(cfg).to_string().as_bytes());
    h.update(b"\n");
    h.update(input_digest.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn keyframes_file(&self) -> PathBuf {
        self.root.join("keyframes").join("keyframes.json")
    }

    pub fn model_file(&self, level: FeatureLevel) -> PathBuf {
        self.root.join("models").join(format!("kpca_{level}.model"))
    }

    pub fn signatures_file(&self, level: FeatureLevel) -> PathBuf {
        self.root.join("models").join(format!("signatures_{level}.ndsg"))
    }

    pub fn index_file(&self, level: FeatureLevel) -> PathBuf {
        self.root.join("index").join(format!("index_{level}.ndix"))
    }

    pub fn neighbors_file(&self, level: FeatureLevel) -> PathBuf {
        self.root.join("index").join(format!("neighbors_{level}.json"))
    }

    pub fn results_file(&self) -> PathBuf {
        self.root.join("results").join("results.json")
    }

    pub fn evaluation_file(&self) -> PathBuf {
        self.root.join("results").join("evaluation.json")
    }

    pub fn pr_dir(&self, level: OutputLevel) -> PathBuf {
        self.root.join("results").join("pr").join(level.as_str())
    }

    pub fn report_file(&self, stage: Stage) -> PathBuf {
        self.root.join("reports").join(format!("{stage}.json"))
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned()
    }

    pub fn read_report(&self, stage: Stage) -> Result<Option<StageReport>> {
        let path = self.report_file(stage);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&std::fs::read(path)?)?))
    }

    /// Checks that `needed` and everything before it ran under `cfg` and
    /// that their artifacts are present; returns the report of `needed`.
    pub fn require(&self, requesting: Stage, needed: Stage, cfg: &PipelineConfig) -> Result<StageReport> {
        let parent_hash = match needed.parent() {
            Some(p) => Some(self.require(requesting, p, cfg)?.config_hash),
            None => None,
        };
        let missing = |path: PathBuf| NdvrError::Ordering {
            stage: requesting.to_string(),
            missing: needed.to_string(),
            path: path.display().to_string(),
        };
        let report = self
            .read_report(needed)?
            .ok_or_else(|| missing(self.report_file(needed)))?;
        for artifact in &report.artifacts {
            let path = self.root.join(artifact);
            if !path.exists() {
                return Err(missing(path));
            }
        }
        let expected = chain_hash(parent_hash.as_deref(), needed, cfg, &report.input_digest);
        if report.config_hash != expected {
            return Err(NdvrError::State(format!(
                "output of stage `{needed}` is stale for the current configuration or inputs; rerun `{needed}` before `{requesting}`"
            )));
        }
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn write_report(
        &self,
        stage: Stage,
        cfg: &PipelineConfig,
        parent: Option<&StageReport>,
        input_digest: String,
        started: std::time::Instant,
        counts: BTreeMap<String, Value>,
        artifacts: &[PathBuf],
    ) -> Result<StageReport> {
        let parent_hash = parent.map(|p| p.config_hash.clone());
        let report = StageReport {
            stage,
            config_hash: chain_hash(parent_hash.as_deref(), stage, cfg, &input_digest),
            parent_hash,
            input_digest,
            seconds: started.elapsed().as_secs_f64(),
            counts,
            artifacts: artifacts.iter().map(|p| self.relative(p)).collect(),
        };
        let path = self.report_file(stage);
        std::fs::create_dir_all(path.parent().expect("report path has a parent"))?;
        std::fs::write(path, serde_json::to_vec_pretty(&report)?)?;
        Ok(report)
    }
}

/// Writes pretty JSON with a trailing newline, creating parent directories.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
