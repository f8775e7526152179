//! Ground-truth files.
//!
//! Whitespace-separated `video_id label` lines. A `query <id>` line opens the
//! group for that query; a file without any `query` line is a single group
//! named after the file stem (the CC_WEB_VIDEO per-query layout). Blank lines
//! and `#` comments are skipped. Labels are mapped to binary relevance by a
//! user-supplied table.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NdvrError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub query_id: String,
    pub relevant: BTreeSet<String>,
    /// Every labelled video for this query, in file order.
    pub gallery: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relevance {
    Relevant,
    Irrelevant,
}

/// Parses `code=1,code=0,...` (also accepts `relevant`/`irrelevant`).
pub fn parse_label_map(spec: &str) -> Result<HashMap<String, Relevance>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (code, value) = pair
                .rsplit_once('=')
                .ok_or_else(|| NdvrError::Config(format!("label map entry `{pair}` is not code=value")))?;
            let rel = match value.trim() {
                "1" | "relevant" | "true" => Relevance::Relevant,
                "0" | "irrelevant" | "false" => Relevance::Irrelevant,
                other => {
                    return Err(NdvrError::Config(format!("label map value `{other}` is not 0/1")))
                }
            };
            Ok((code.trim().to_string(), rel))
        })
        .collect()
}

pub fn parse_ground_truth(
    text: &str,
    default_query: &str,
    label_map: &HashMap<String, Relevance>,
) -> Result<Vec<GroundTruth>> {
    let mut groups: Vec<GroundTruth> = Vec::new();
    let new_group = |id: &str| GroundTruth {
        query_id: id.to_string(),
        relevant: BTreeSet::new(),
        gallery: Vec::new(),
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let first = fields.next().unwrap_or_default();
        let second = fields.next();
        if first == "query" {
            let id = second.ok_or_else(|| {
                NdvrError::Config(format!("line {}: `query` without an id", lineno + 1))
            })?;
            groups.push(new_group(id));
            continue;
        }
        let label = second.ok_or_else(|| {
            NdvrError::Config(format!("line {}: expected `video_id label`", lineno + 1))
        })?;
        let rel = label_map.get(label).ok_or_else(|| {
            NdvrError::Mapping(format!("label code `{label}` (line {}) is not in the label map", lineno + 1))
        })?;
        if groups.is_empty() {
            groups.push(new_group(default_query));
        }
        let group = groups.last_mut().expect("group just ensured");
        group.gallery.push(first.to_string());
        if *rel == Relevance::Relevant {
            group.relevant.insert(first.to_string());
        }
    }
    if groups.is_empty() {
        groups.push(new_group(default_query));
    }
    Ok(groups)
}

pub fn load_ground_truth(path: &Path, label_map: &HashMap<String, Relevance>) -> Result<Vec<GroundTruth>> {
    let text = std::fs::read_to_string(path)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "query".to_string());
    parse_ground_truth(&text, &stem, label_map)
}

/// Writes groups with `1`/`0` labels, readable with the map `1=1,0=0`.
pub fn write_ground_truth<W: Write>(truths: &[GroundTruth], mut out: W) -> Result<()> {
    for t in truths {
        writeln!(out, "query {}", t.query_id)?;
        for id in &t.gallery {
            let label = if t.relevant.contains(id) { 1 } else { 0 };
            writeln!(out, "{id}\t{label}")?;
        }
    }
    out.flush()?;
    Ok(())
}
