//! Per-level candidate search, per-level rankings and the fused ranking.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{OutputLevel, PipelineConfig};
use crate::aggregation::{build_llf, build_ulf, FeatureLevel};
use crate::ann_index::{AnnIndex, Neighbor, NeighborList};
use crate::error::{NdvrError, Result};
use crate::eval::{RankedResult, ScoredVideo};
use crate::feature_store::VideoFeatures;
use crate::fsuml::{video_distance, video_distance_pair, SsoParams};
use crate::kpca::KpcaModel;
use crate::rerank::{rerank, ActivationTable, Gallery};
use crate::signature::{to_storage_precision, SignatureSet, VideoSignature};

/// A query given either by gallery id or by a feature file outside the
/// gallery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuerySpec {
    Id(String),
    Path(PathBuf),
}

impl QuerySpec {
    /// An existing file is a path; anything else is a gallery id.
    pub fn parse(s: &str) -> Self {
        let p = PathBuf::from(s);
        if p.is_file() {
            QuerySpec::Path(p)
        } else {
            QuerySpec::Id(s.to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub levels: BTreeMap<OutputLevel, Vec<ScoredVideo>>,
}

impl QueryResult {
    pub fn ranked(&self, level: OutputLevel) -> Option<RankedResult> {
        self.levels.get(&level).map(|ranking| RankedResult {
            query_id: self.query_id.clone(),
            ranking: ranking.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub config_hash: String,
    pub queries: Vec<QueryResult>,
}

/// Stored per-video neighbour lists of one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct NeighborsFile {
    pub config_hash: String,
    pub level: FeatureLevel,
    pub lists: BTreeMap<String, NeighborList>,
}

/// Reduced descriptors of the chosen keyframes of one video.
pub(crate) fn descriptors(video: &VideoFeatures, selected: &[usize], level: FeatureLevel) -> Result<Vec<Vec<f64>>> {
    selected
        .iter()
        .map(|&i| {
            let frame = video.frames.get(i).ok_or_else(|| {
                NdvrError::Validation(format!("keyframe {i} out of range for {}", video.video_id))
            })?;
            let d = match level {
                FeatureLevel::Fc => build_ulf(&frame.fc_vector),
                FeatureLevel::Conv => build_llf(&frame.conv_vectors),
            }
            .map_err(|e| NdvrError::DegenerateDescriptor(format!("{} frame {i}: {e}", video.video_id)))?;
            Ok(d.vector)
        })
        .collect()
}

pub(crate) fn project(model: &KpcaModel, video_id: &str, rows: &[Vec<f64>]) -> Result<VideoSignature> {
    let mut rows = model.transform_batch(rows)?;
    rows.iter_mut().for_each(|r| to_storage_precision(r));
    Ok(VideoSignature { video_id: video_id.to_string(), rows })
}

/// Everything the query path needs for one feature level.
pub(crate) struct LevelState {
    pub signatures: SignatureSet,
    pub index: AnnIndex,
}

impl LevelState {
    /// Up to `pool` gallery videos nearest by centroid; `exclude` is dropped.
    fn candidates(&self, query: &VideoSignature, exclude: Option<&str>, cfg: &PipelineConfig) -> Result<Vec<Neighbor>> {
        let n = self.index.len();
        let excluded_present = exclude.is_some_and(|id| self.signatures.get(id).is_some());
        let available = n - usize::from(excluded_present);
        let pool = cfg.pool_size().min(available);
        if pool == 0 {
            return Ok(Vec::new());
        }
        let fetch = (pool + usize::from(excluded_present)).min(n);
        let centroid = query.centroid()?;
        let candidates = self.index.knn(&centroid, fetch, cfg.search_budget(fetch))?;
        Ok(candidates
            .entries
            .into_iter()
            .filter(|c| Some(c.video_id.as_str()) != exclude)
            .take(pool)
            .collect())
    }

    fn gallery(&self, video_id: &str) -> Result<&VideoSignature> {
        self.signatures
            .get(video_id)
            .ok_or_else(|| NdvrError::State(format!("index lists {video_id} but no signature exists")))
    }

    /// The centroid candidates re-ordered by the learned video distance.
    pub fn neighbor_list(
        &self,
        query: &VideoSignature,
        exclude: Option<&str>,
        cfg: &PipelineConfig,
    ) -> Result<NeighborList> {
        let sso = cfg.sso_params();
        let entries = self
            .candidates(query, exclude, cfg)?
            .into_iter()
            .map(|c| {
                let distance = video_distance(&query.rows, &self.gallery(&c.video_id)?.rows, &sso)?;
                Ok(Neighbor { distance, ..c })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(sorted_list(entries))
    }

    /// The neighbour list followed by every other gallery video in order of
    /// centroid distance.
    pub fn ranking(
        &self,
        query: &VideoSignature,
        list: &NeighborList,
        exclude: Option<&str>,
    ) -> Result<Vec<(String, f64)>> {
        let mut ordered: Vec<(String, f64)> =
            list.entries.iter().map(|e| (e.video_id.clone(), e.distance)).collect();
        let seen: HashSet<&str> = list.ids().chain(exclude).collect();
        let rest = self.index.len().saturating_sub(seen.len());
        if rest > 0 {
            let centroid = query.centroid()?;
            let all = self.index.brute_knn(&centroid, self.index.len())?;
            ordered.extend(
                all.entries
                    .into_iter()
                    .filter(|e| !seen.contains(e.video_id.as_str()))
                    .map(|e| (e.video_id, e.distance)),
            );
        }
        Ok(ordered)
    }

    pub fn sso_distance(&self, query: &VideoSignature, gallery_id: &str, sso: &SsoParams) -> Result<f64> {
        let g = self
            .signatures
            .get(gallery_id)
            .ok_or_else(|| NdvrError::Mapping(format!("{gallery_id} has no signature")))?;
        video_distance(&query.rows, &g.rows, sso)
    }
}

fn sorted_list(mut entries: Vec<Neighbor>) -> NeighborList {
    entries.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.video_id.cmp(&b.video_id)));
    NeighborList { entries }
}

/// Neighbour lists of every gallery video against the rest of the gallery.
/// Each unordered pair that appears in some candidate pool is scored once in
/// both directions.
pub(crate) fn gallery_neighbor_lists(
    state: &LevelState,
    cfg: &PipelineConfig,
) -> Result<BTreeMap<String, NeighborList>> {
    let sigs = state.signatures.signatures();
    let pools = sigs
        .par_iter()
        .map(|sig| state.candidates(sig, Some(&sig.video_id), cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = BTreeSet::new();
    for (a, pool) in pools.iter().enumerate() {
        for c in pool {
            let b = state
                .signatures
                .position(&c.video_id)
                .ok_or_else(|| NdvrError::State(format!("index lists {} but no signature exists", c.video_id)))?;
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let sso = cfg.sso_params();
    let pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
    let scored = pairs
        .par_iter()
        .map(|&(a, b)| video_distance_pair(&sigs[a].rows, &sigs[b].rows, &sso))
        .collect::<Result<Vec<_>>>()?;
    let mut distances = HashMap::with_capacity(2 * pairs.len());
    for (&(a, b), &(ab, ba)) in pairs.iter().zip(&scored) {
        distances.insert((a, b), ab);
        distances.insert((b, a), ba);
    }
    sigs.iter()
        .zip(pools)
        .enumerate()
        .map(|(a, (sig, pool))| {
            let entries = pool
                .into_iter()
                .map(|c| {
                    let b = state.signatures.position(&c.video_id).expect("checked above");
                    Neighbor { distance: distances[&(a, b)], ..c }
                })
                .collect();
            Ok((sig.video_id.clone(), sorted_list(entries)))
        })
        .collect()
}

/// Loaded gallery state for answering queries.
pub(crate) struct Engine {
    pub cfg: PipelineConfig,
    pub fc: LevelState,
    pub conv: LevelState,
    pub fc_lists: BTreeMap<String, NeighborList>,
    pub conv_lists: BTreeMap<String, NeighborList>,
    pub table: ActivationTable,
    pub models: [KpcaModel; 2],
}

/// A query resolved to its signatures and neighbour lists.
pub(crate) struct PreparedQuery {
    pub query_id: String,
    /// Set when the query is itself a gallery video.
    pub exclude: Option<String>,
    pub fc: VideoSignature,
    pub conv: VideoSignature,
    pub fc_list: NeighborList,
    pub conv_list: NeighborList,
}

impl Engine {
    pub fn new(
        cfg: PipelineConfig,
        fc: LevelState,
        conv: LevelState,
        fc_lists: BTreeMap<String, NeighborList>,
        conv_lists: BTreeMap<String, NeighborList>,
        models: [KpcaModel; 2],
    ) -> Result<Self> {
        let gallery = Gallery::new(fc.signatures.ids())?;
        if conv.signatures.ids() != gallery.ids() {
            return Err(NdvrError::State("fc and conv signature sets list different videos".into()));
        }
        let to_map = |m: &BTreeMap<String, NeighborList>| -> HashMap<String, NeighborList> {
            m.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
        };
        let table = ActivationTable::build(gallery, cfg.knn_k, &to_map(&fc_lists), &to_map(&conv_lists))?;
        Ok(Self { cfg, fc, conv, fc_lists, conv_lists, table, models })
    }

    fn level(&self, level: FeatureLevel) -> &LevelState {
        match level {
            FeatureLevel::Fc => &self.fc,
            FeatureLevel::Conv => &self.conv,
        }
    }

    pub fn prepare(&self, spec: &QuerySpec) -> Result<PreparedQuery> {
        match spec {
            QuerySpec::Id(id) => {
                let lookup = |level: FeatureLevel| -> Result<(VideoSignature, NeighborList)> {
                    let state = self.level(level);
                    let sig = state
                        .signatures
                        .get(id)
                        .ok_or_else(|| NdvrError::Mapping(format!("query `{id}` is not a gallery video")))?
                        .clone();
                    let lists = match level {
                        FeatureLevel::Fc => &self.fc_lists,
                        FeatureLevel::Conv => &self.conv_lists,
                    };
                    let list = lists
                        .get(id)
                        .cloned()
                        .ok_or_else(|| NdvrError::State(format!("no {level} neighbour list for {id}")))?;
                    Ok((sig, list))
                };
                let (fc, fc_list) = lookup(FeatureLevel::Fc)?;
                let (conv, conv_list) = lookup(FeatureLevel::Conv)?;
                Ok(PreparedQuery { query_id: id.clone(), exclude: Some(id.clone()), fc, conv, fc_list, conv_list })
            }
            QuerySpec::Path(path) => {
                let video = crate::feature_store::read_features_file(path)?;
                let keys = crate::keyframe::select_keyframes(&video, self.cfg.rate)?;
                let [fc_model, conv_model] = &self.models;
                let fc = project(fc_model, &video.video_id, &descriptors(&video, &keys.selected, FeatureLevel::Fc)?)?;
                let conv =
                    project(conv_model, &video.video_id, &descriptors(&video, &keys.selected, FeatureLevel::Conv)?)?;
                let exclude = self.fc.signatures.get(&video.video_id).map(|_| video.video_id.clone());
                let fc_list = self.fc.neighbor_list(&fc, exclude.as_deref(), &self.cfg)?;
                let conv_list = self.conv.neighbor_list(&conv, exclude.as_deref(), &self.cfg)?;
                Ok(PreparedQuery { query_id: video.video_id, exclude, fc, conv, fc_list, conv_list })
            }
        }
    }

    pub fn answer(&self, q: &PreparedQuery) -> Result<QueryResult> {
        let exclude = q.exclude.as_deref();
        let fc_rank = self.fc.ranking(&q.fc, &q.fc_list, exclude)?;
        let conv_rank = self.conv.ranking(&q.conv, &q.conv_list, exclude)?;

        let mut levels = BTreeMap::new();
        if self.cfg.wants(OutputLevel::Fused) {
            levels.insert(OutputLevel::Fused, self.fused(q, &fc_rank, &conv_rank)?);
        }
        let scored = |ordered: Vec<(String, f64)>| RankedResult::from_ordered(q.query_id.clone(), ordered).ranking;
        if self.cfg.wants(OutputLevel::Fc) {
            levels.insert(OutputLevel::Fc, scored(fc_rank));
        }
        if self.cfg.wants(OutputLevel::Conv) {
            levels.insert(OutputLevel::Conv, scored(conv_rank));
        }
        Ok(QueryResult { query_id: q.query_id.clone(), levels })
    }

    fn fused(
        &self,
        q: &PreparedQuery,
        fc_rank: &[(String, f64)],
        conv_rank: &[(String, f64)],
    ) -> Result<Vec<ScoredVideo>> {
        let activations = self.table.query_activations(&q.fc_list, &q.conv_list)?;

        let mut mean_rank: HashMap<&str, f64> = HashMap::new();
        for ranking in [fc_rank, conv_rank] {
            for (r, (id, _)) in ranking.iter().enumerate() {
                *mean_rank.entry(id.as_str()).or_default() += 0.5 * (r + 1) as f64;
            }
        }
        let mut fallback: Vec<(&str, f64)> = mean_rank.into_iter().collect();
        fallback.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
        let fallback: Vec<String> = fallback.into_iter().map(|(id, _)| id.to_string()).collect();

        let pool_distance = |list: &NeighborList, id: &str| list.entries.iter().find(|e| e.video_id == id).map(|e| e.distance);
        let sso = self.cfg.sso_params();
        let tie_break = |id: &str| -> Result<f64> {
            let fc = match pool_distance(&q.fc_list, id) {
                Some(d) => d,
                None => self.fc.sso_distance(&q.fc, id, &sso)?,
            };
            let conv = match pool_distance(&q.conv_list, id) {
                Some(d) => d,
                None => self.conv.sso_distance(&q.conv, id, &sso)?,
            };
            Ok(0.5 * (fc + conv))
        };
        let query_id = q.exclude.as_deref().unwrap_or(&q.query_id);
        let mut ranked = rerank(query_id, &activations, &self.table, &fallback, tie_break)?;
        ranked.query_id = q.query_id.clone();
        Ok(ranked.ranking)
    }
}
