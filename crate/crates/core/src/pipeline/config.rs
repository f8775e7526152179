use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::FeatureLevel;
use crate::ann_index::{self, DEFAULT_LEAF_SIZE, DEFAULT_NUM_TREES};
use crate::error::{NdvrError, Result};
use crate::fsuml::{QuadraticForm, SigmaChoice, SsoParams, DEFAULT_SSO_K};
use crate::keyframe::DEFAULT_RATE;
use crate::kpca::DEFAULT_OUT_DIM;

/// A ranking that can be requested from the query stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputLevel {
    Fc,
    Conv,
    Fused,
}

impl OutputLevel {
    pub const ALL: [OutputLevel; 3] = [OutputLevel::Fc, OutputLevel::Conv, OutputLevel::Fused];

    pub fn as_str(self) -> &'static str {
        match self {
            OutputLevel::Fc => "fc",
            OutputLevel::Conv => "conv",
            OutputLevel::Fused => "fused",
        }
    }

    pub fn feature_level(self) -> Option<FeatureLevel> {
        match self {
            OutputLevel::Fc => Some(FeatureLevel::Fc),
            OutputLevel::Conv => Some(FeatureLevel::Conv),
            OutputLevel::Fused => None,
        }
    }
}

impl fmt::Display for OutputLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutputLevel {
    type Err = NdvrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(OutputLevel::Fused),
            other => match other.parse::<FeatureLevel>()? {
                FeatureLevel::Fc => Ok(OutputLevel::Fc),
                FeatureLevel::Conv => Ok(OutputLevel::Conv),
            },
        }
    }
}

/// Every tunable of the pipeline. Loaded from TOML; absent keys take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Keyframes per second of video.
    pub rate: f64,
    pub kpca_dim: usize,
    pub kpca_sigma: SigmaChoice,
    /// Maximum number of keyframe descriptors used to fit each model.
    pub kpca_sample: usize,
    pub sso_k: f64,
    pub sso_sigma: SigmaChoice,
    pub sso_form: QuadraticForm,
    /// Neighbourhood size for re-ranking.
    pub knn_k: usize,
    pub num_trees: usize,
    pub leaf_size: usize,
    /// Leaf budget per search; `None` uses the index default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    pub seed: u64,
    pub levels: Vec<OutputLevel>,
    /// Ground-truth label codes, `code=1` relevant and `code=0` not.
    pub label_map: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rate: DEFAULT_RATE,
            kpca_dim: DEFAULT_OUT_DIM,
            kpca_sigma: SigmaChoice::Median,
            kpca_sample: 2000,
            sso_k: DEFAULT_SSO_K,
            sso_sigma: SigmaChoice::Median,
            sso_form: QuadraticForm::Absolute,
            knn_k: 25,
            num_trees: DEFAULT_NUM_TREES,
            leaf_size: DEFAULT_LEAF_SIZE,
            budget: None,
            seed: 7,
            levels: OutputLevel::ALL.to_vec(),
            label_map: "1=1,0=0".into(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| NdvrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NdvrError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| NdvrError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("kpca_dim", self.kpca_dim),
            ("kpca_sample", self.kpca_sample),
            ("knn_k", self.knn_k),
            ("num_trees", self.num_trees),
            ("leaf_size", self.leaf_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NdvrError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(NdvrError::Config(format!("rate must be positive, got {}", self.rate)));
        }
        if self.budget == Some(0) {
            return Err(NdvrError::Config("budget must be positive".into()));
        }
        if self.levels.is_empty() {
            return Err(NdvrError::Config("at least one output level is required".into()));
        }
        if self.kpca_sample < 2 {
            return Err(NdvrError::Config("kpca_sample must be at least 2".into()));
        }
        self.sso_params().validate().map_err(|e| NdvrError::Config(e.to_string()))?;
        crate::eval::parse_label_map(&self.label_map)?;
        Ok(())
    }

    pub fn sso_params(&self) -> SsoParams {
        SsoParams {
            k: self.sso_k,
            sigma: self.sso_sigma,
            t: 1,
            form: self.sso_form,
        }
    }

    /// Candidate pool re-ranked by the learned metric, `max(4k, 50)`.
    pub fn pool_size(&self) -> usize {
        (4 * self.knn_k).max(50)
    }

    pub fn search_budget(&self, k: usize) -> usize {
        self.budget
            .unwrap_or_else(|| ann_index::default_budget(k, self.num_trees))
    }

    pub fn wants(&self, level: OutputLevel) -> bool {
        self.levels.contains(&level)
    }
}
