use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{OutputLevel, PipelineConfig};
use super::retrieval::{
    descriptors, gallery_neighbor_lists, project, Engine, LevelState, NeighborsFile, QueryResult, QuerySpec,
    ResultsFile,
};
use super::{read_json, sha256_hex, write_json, Stage, StageReport, Workspace};
use crate::aggregation::FeatureLevel;
use crate::ann_index::{AnnIndex, IndexParams};
use crate::error::{NdvrError, Result};
use crate::eval::{
    average_precision, load_ground_truth, mean_ap, parse_label_map, precision_recall, write_ground_truth,
    write_pr_csv, GroundTruth, SynthDataset,
};
use crate::feature_store::{self, VideoFeatures, EXTENSION, MANIFEST_FILE};
use crate::keyframe::{select_keyframes, KeyframeSet};
use crate::kpca::{median_sigma, training_sample, KpcaModel, RankPolicy};
use crate::fsuml::SigmaChoice;
use crate::signature::SignatureSet;

/// File name of the ground truth written next to a synthetic dataset.
pub const TRUTH_FILE: &str = "truth.txt";

/// `keyframes/keyframes.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyframesFile {
    pub config_hash: String,
    pub videos: Vec<KeyframeSet>,
}

fn counts(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn load_input(input: &Path) -> Result<Vec<VideoFeatures>> {
    if input.is_file() {
        return Ok(vec![feature_store::read_features_file(input)?]);
    }
    if input.join(MANIFEST_FILE).exists() {
        return feature_store::read_dataset(input);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == EXTENSION));
    files.sort();
    files.iter().map(|p| feature_store::read_features_file(p)).collect()
}

/// Validates and copies a feature dataset into the workspace.
pub fn ingest(ws: &Workspace, cfg: &PipelineConfig, input: &Path) -> Result<StageReport> {
    let started = Instant::now();
    cfg.validate()?;
    let videos = load_input(input)?;
    let first = videos
        .first()
        .ok_or_else(|| NdvrError::Validation(format!("no .{EXTENSION} files under {}", input.display())))?;
    let (fc_dim, layer_dims) = (first.fc_dim(), first.layer_dims());
    let mut ids = HashSet::new();
    for v in &videos {
        if !ids.insert(v.video_id.as_str()) {
            return Err(NdvrError::Validation(format!("video id {} appears twice", v.video_id)));
        }
        if v.fc_dim() != fc_dim || v.layer_dims() != layer_dims {
            return Err(NdvrError::Dimension(format!(
                "{} has feature dims fc={} conv={:?}, expected fc={fc_dim} conv={layer_dims:?}",
                v.video_id,
                v.fc_dim(),
                v.layer_dims()
            )));
        }
    }

    let dir = ws.features_dir();
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    let manifest = feature_store::write_dataset(&dir, &videos)?;
    let mut digest_input = std::fs::read(dir.join(MANIFEST_FILE))?;
    let mut artifacts = vec![dir.join(MANIFEST_FILE)];
    for entry in &manifest {
        let path = dir.join(&entry.path);
        digest_input.extend_from_slice(sha256_hex(&std::fs::read(&path)?).as_bytes());
        artifacts.push(path);
    }
    let frames: usize = videos.iter().map(VideoFeatures::len).sum();
    info!("ingested {} videos, {frames} frames", videos.len());
    ws.write_report(
        Stage::Ingest,
        cfg,
        None,
        sha256_hex(&digest_input),
        started,
        counts(&[
            ("videos", json!(videos.len())),
            ("frames", json!(frames)),
            ("fc_dim", json!(fc_dim)),
            ("layer_dims", json!(layer_dims)),
        ]),
        &artifacts,
    )
}

pub fn keyframes(ws: &Workspace, cfg: &PipelineConfig) -> Result<StageReport> {
    let started = Instant::now();
    let parent = ws.require(Stage::Keyframes, Stage::Ingest, cfg)?;
    let videos = feature_store::read_dataset(&ws.features_dir())?;
    let sets = videos
        .iter()
        .map(|v| select_keyframes(v, cfg.rate))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = sets.iter().map(|s| s.selected.len()).sum();
    let path = ws.keyframes_file();
    write_json(
        &path,
        &KeyframesFile { config_hash: parent.config_hash.clone(), videos: sets },
    )?;
    info!("selected {total} keyframes from {} videos", videos.len());
    ws.write_report(
        Stage::Keyframes,
        cfg,
        Some(&parent),
        String::new(),
        started,
        counts(&[("videos", json!(videos.len())), ("keyframes", json!(total))]),
        &[path],
    )
}

/// Fits one kernel PCA model per level on a sample of keyframe descriptors
/// and writes every video's reduced signature.
pub fn reduce(ws: &Workspace, cfg: &PipelineConfig) -> Result<StageReport> {
    let started = Instant::now();
    let parent = ws.require(Stage::Reduce, Stage::Keyframes, cfg)?;
    let videos = feature_store::read_dataset(&ws.features_dir())?;
    let keys: KeyframesFile = read_json(&ws.keyframes_file())?;
    if keys.videos.len() != videos.len() || keys.videos.iter().zip(&videos).any(|(k, v)| k.video_id != v.video_id) {
        return Err(NdvrError::State("keyframes do not match the ingested videos; rerun `keyframes`".into()));
    }

    let mut report_counts = BTreeMap::new();
    let mut artifacts = Vec::new();
    for level in FeatureLevel::ALL {
        let per_video = videos
            .iter()
            .zip(&keys.videos)
            .map(|(v, k)| descriptors(v, &k.selected, level))
            .collect::<Result<Vec<_>>>()?;
        let all_rows: Vec<Vec<f64>> = per_video.iter().flatten().cloned().collect();
        let sample = training_sample(&all_rows, cfg.kpca_sample, cfg.seed);
        if sample.len() < 2 {
            return Err(NdvrError::DegenerateSample(format!(
                "{level}: kernel PCA needs at least two keyframes, found {}",
                sample.len()
            )));
        }
        let sigma = match cfg.kpca_sigma {
            SigmaChoice::Median => median_sigma(&sample, cfg.seed)?,
            SigmaChoice::Fixed(s) => s,
        };
        let out_dim = cfg.kpca_dim.min(sample.len() - 1);
        if out_dim < cfg.kpca_dim {
            log::warn!(
                "{level}: {} training descriptors allow at most {out_dim} components, not {}",
                sample.len(),
                cfg.kpca_dim
            );
        }
        let fitted = KpcaModel::fit_with_policy(&sample, sigma, out_dim, RankPolicy::Shrink)?;
        let model_path = ws.model_file(level);
        std::fs::create_dir_all(model_path.parent().expect("model path has a parent"))?;
        fitted.save(&model_path)?;
        let model = KpcaModel::load(&model_path)?;

        let signatures = videos
            .iter()
            .zip(&per_video)
            .map(|(v, rows)| project(&model, &v.video_id, rows))
            .collect::<Result<Vec<_>>>()?;
        let set = SignatureSet::new(level, model.out_dim(), signatures)?;
        let sig_path = ws.signatures_file(level);
        set.save(&sig_path)?;
        info!("{level}: kernel PCA on {} descriptors, sigma {sigma:.6}, {} components", sample.len(), model.out_dim());
        report_counts.insert(
            level.to_string(),
            json!({
                "descriptors": all_rows.len(),
                "training": sample.len(),
                "sigma": sigma,
                "components": model.out_dim(),
            }),
        );
        artifacts.push(model_path);
        artifacts.push(sig_path);
    }
    ws.write_report(Stage::Reduce, cfg, Some(&parent), String::new(), started, report_counts, &artifacts)
}

fn centroid_index(set: &SignatureSet, cfg: &PipelineConfig) -> Result<AnnIndex> {
    let centroids = set
        .signatures()
        .iter()
        .map(|s| s.centroid())
        .collect::<Result<Vec<_>>>()?;
    let params = IndexParams {
        num_trees: cfg.num_trees,
        leaf_size: cfg.leaf_size,
        seed: cfg.seed,
        random_rotation: true,
    };
    AnnIndex::build(&centroids, &set.ids(), &params)
}

/// Builds the per-level forests over video centroids and the neighbour list
/// of every gallery video.
pub fn index(ws: &Workspace, cfg: &PipelineConfig) -> Result<StageReport> {
    let started = Instant::now();
    let parent = ws.require(Stage::Index, Stage::Reduce, cfg)?;
    let mut artifacts = Vec::new();
    let mut report_counts = BTreeMap::new();
    for level in FeatureLevel::ALL {
        let signatures = SignatureSet::load(&ws.signatures_file(level))?;
        let index_path = ws.index_file(level);
        std::fs::create_dir_all(index_path.parent().expect("index path has a parent"))?;
        centroid_index(&signatures, cfg)?.save(&index_path)?;
        let state = LevelState { signatures, index: AnnIndex::load(&index_path)? };
        let level_started = Instant::now();
        let lists = gallery_neighbor_lists(&state, cfg)?;
        info!(
            "{level}: neighbour lists for {} videos in {:.1}s",
            lists.len(),
            level_started.elapsed().as_secs_f64()
        );
        let lists_path = ws.neighbors_file(level);
        write_json(
            &lists_path,
            &NeighborsFile { config_hash: parent.config_hash.clone(), level, lists },
        )?;
        report_counts.insert(
            level.to_string(),
            json!({ "videos": state.index.len(), "dim": state.index.dim(), "pool": cfg.pool_size() }),
        );
        artifacts.push(index_path);
        artifacts.push(lists_path);
    }
    ws.write_report(Stage::Index, cfg, Some(&parent), String::new(), started, report_counts, &artifacts)
}

fn load_engine(ws: &Workspace, cfg: &PipelineConfig) -> Result<Engine> {
    let load_level = |level: FeatureLevel| -> Result<(LevelState, NeighborsFile)> {
        let state = LevelState {
            signatures: SignatureSet::load(&ws.signatures_file(level))?,
            index: AnnIndex::load(&ws.index_file(level))?,
        };
        let lists: NeighborsFile = read_json(&ws.neighbors_file(level))?;
        Ok((state, lists))
    };
    let (fc, fc_lists) = load_level(FeatureLevel::Fc)?;
    let (conv, conv_lists) = load_level(FeatureLevel::Conv)?;
    let models = [
        KpcaModel::load(&ws.model_file(FeatureLevel::Fc))?,
        KpcaModel::load(&ws.model_file(FeatureLevel::Conv))?,
    ];
    Engine::new(cfg.clone(), fc, conv, fc_lists.lists, conv_lists.lists, models)
}

/// Ranks the gallery for each query and writes `results/results.json`.
/// With no queries every gallery video is queried.
pub fn query(ws: &Workspace, cfg: &PipelineConfig, queries: &[QuerySpec]) -> Result<(ResultsFile, StageReport)> {
    let started = Instant::now();
    let parent = ws.require(Stage::Query, Stage::Index, cfg)?;
    let engine = load_engine(ws, cfg)?;
    let specs: Vec<QuerySpec> = if queries.is_empty() {
        engine.fc.signatures.ids().into_iter().map(QuerySpec::Id).collect()
    } else {
        queries.to_vec()
    };
    let results = specs
        .iter()
        .map(|spec| engine.answer(&engine.prepare(spec)?))
        .collect::<Result<Vec<QueryResult>>>()?;

    let query_ids: Vec<&str> = results.iter().map(|r| r.query_id.as_str()).collect();
    let digest = sha256_hex(serde_json::to_string(&query_ids)?.as_bytes());
    let file = ResultsFile { config_hash: parent.config_hash.clone(), queries: results };
    let path = ws.results_file();
    write_json(&path, &file)?;
    let report = ws.write_report(
        Stage::Query,
        cfg,
        Some(&parent),
        digest,
        started,
        counts(&[("queries", json!(file.queries.len()))]),
        &[path],
    )?;
    Ok((file, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub query_id: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEvaluation {
    pub per_query: Vec<QueryAp>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub config_hash: String,
    pub levels: BTreeMap<OutputLevel, LevelEvaluation>,
}

/// AP per ground-truth query and mAP for each requested level. With
/// `pr_dirs` (one per level) a PR curve CSV per query is written there; the
/// written paths are returned.
pub fn score_results(
    results: &ResultsFile,
    truths: &[GroundTruth],
    levels: &[OutputLevel],
    pr_dirs: Option<&[PathBuf]>,
) -> Result<(BTreeMap<OutputLevel, LevelEvaluation>, Vec<PathBuf>)> {
    let by_id: BTreeMap<&str, &QueryResult> = results.queries.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let mut out = BTreeMap::new();
    let mut written = Vec::new();
    for (li, &level) in levels.iter().enumerate() {
        let pr_dir = pr_dirs.map(|dirs| &dirs[li]);
        if let Some(dir) = pr_dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut per_query = Vec::with_capacity(truths.len());
        for truth in truths {
            let result = by_id.get(truth.query_id.as_str()).ok_or_else(|| {
                NdvrError::Mapping(format!("ground-truth query {} has no results; run `query` for it", truth.query_id))
            })?;
            let ranked = result.ranked(level).ok_or_else(|| {
                NdvrError::State(format!("results for {} lack the {level} ranking", truth.query_id))
            })?;
            let ap = average_precision(&ranked, truth)?;
            if let Some(dir) = pr_dir {
                let csv_path = dir.join(format!("{}.csv", truth.query_id));
                write_pr_csv(&precision_recall(&ranked, truth)?, std::fs::File::create(&csv_path)?)?;
                written.push(csv_path);
            }
            per_query.push(QueryAp { query_id: truth.query_id.clone(), ap });
        }
        let aps: Vec<f64> = per_query.iter().map(|q| q.ap).collect();
        let map = mean_ap(&aps)?;
        info!("{level}: mAP {map:.4} over {} queries", aps.len());
        out.insert(level, LevelEvaluation { per_query, map });
    }
    Ok((out, written))
}

/// Scores the stored results against a ground-truth file. Every query of the
/// ground truth must have been run.
pub fn evaluate(ws: &Workspace, cfg: &PipelineConfig, truth_path: &Path) -> Result<(EvaluationFile, StageReport)> {
    let started = Instant::now();
    let parent = ws.require(Stage::Evaluate, Stage::Query, cfg)?;
    let label_map = parse_label_map(&cfg.label_map)?;
    let truths = load_ground_truth(truth_path, &label_map)?;
    let results: ResultsFile = read_json(&ws.results_file())?;
    let levels: Vec<OutputLevel> = OutputLevel::ALL.into_iter().filter(|l| cfg.wants(*l)).collect();
    let pr_dirs: Vec<PathBuf> = levels.iter().map(|l| ws.pr_dir(*l)).collect();
    let (levels, csvs) = score_results(&results, &truths, &levels, Some(&pr_dirs))?;
    let mut artifacts = vec![ws.evaluation_file()];
    artifacts.extend(csvs);

    let truth_digest = sha256_hex(&std::fs::read(truth_path)?);
    let file = EvaluationFile { config_hash: parent.config_hash.clone(), levels };
    write_json(&ws.evaluation_file(), &file)?;
    let maps: BTreeMap<String, Value> = file.levels.iter().map(|(l, e)| (format!("map_{l}"), json!(e.map))).collect();
    let mut report_counts = counts(&[("queries", json!(truths.len()))]);
    report_counts.extend(maps);
    let report = ws.write_report(
        Stage::Evaluate,
        cfg,
        Some(&parent),
        truth_digest,
        started,
        report_counts,
        &artifacts,
    )?;
    Ok((file, report))
}

/// Ingest through query, then evaluation when a ground truth is given. The
/// ground-truth queries are the ones run; without one every video is.
pub fn run_all(
    ws: &Workspace,
    cfg: &PipelineConfig,
    input: &Path,
    truth: Option<&Path>,
) -> Result<(ResultsFile, Option<EvaluationFile>)> {
    ingest(ws, cfg, input)?;
    keyframes(ws, cfg)?;
    reduce(ws, cfg)?;
    index(ws, cfg)?;
    let queries: Vec<QuerySpec> = match truth {
        Some(path) => load_ground_truth(path, &parse_label_map(&cfg.label_map)?)?
            .into_iter()
            .map(|t| QuerySpec::Id(t.query_id))
            .collect(),
        None => Vec::new(),
    };
    let (results, _) = query(ws, cfg, &queries)?;
    let evaluation = match truth {
        Some(path) => Some(evaluate(ws, cfg, path)?.0),
        None => None,
    };
    Ok((results, evaluation))
}

/// Writes a synthetic dataset as NDVF files, a manifest and `truth.txt`
/// (labels `1`/`0`).
pub fn write_synth(dir: &Path, data: &SynthDataset) -> Result<PathBuf> {
    feature_store::write_dataset(dir, &data.videos)?;
    let truth = dir.join(TRUTH_FILE);
    write_ground_truth(&data.truths, std::io::BufWriter::new(std::fs::File::create(&truth)?))?;
    Ok(truth)
}
