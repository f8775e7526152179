use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{GroundTruth, RankedResult};
use crate::error::{NdvrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Rank cutoff, 1-based.
    pub rank: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Raw (uninterpolated) precision/recall at every rank cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

fn checked_relevant<'a>(result: &RankedResult, truth: &'a GroundTruth) -> Result<HashSet<&'a str>> {
    if truth.relevant.is_empty() {
        return Err(NdvrError::UndefinedRecall(truth.query_id.clone()));
    }
    let mut seen = HashSet::with_capacity(result.ranking.len());
    for id in result.ids() {
        if !seen.insert(id) {
            return Err(NdvrError::Validation(format!(
                "ranking for {} lists {id} twice",
                result.query_id
            )));
        }
    }
    Ok(truth.relevant.iter().map(String::as_str).collect())
}

pub fn precision_recall(result: &RankedResult, truth: &GroundTruth) -> Result<PrCurve> {
    let relevant = checked_relevant(result, truth)?;
    let m = relevant.len() as f64;
    let mut hits = 0usize;
    let points = result
        .ids()
        .enumerate()
        .map(|(i, id)| {
            if relevant.contains(id) {
                hits += 1;
            }
            PrPoint {
                rank: i + 1,
                precision: hits as f64 / (i + 1) as f64,
                recall: hits as f64 / m,
            }
        })
        .collect();
    Ok(PrCurve { points })
}

/// `(1/m) * sum_i i / r_i` over the retrieved relevant videos, `r_i` being
/// the rank of the i-th one. Relevant videos missing from the ranking add 0.
pub fn average_precision(result: &RankedResult, truth: &GroundTruth) -> Result<f64> {
    let relevant = checked_relevant(result, truth)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in result.ids().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

pub fn mean_ap(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(NdvrError::Parameter("mean AP of zero queries".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// `rank,precision,recall` rows with a header line.
pub fn write_pr_csv<W: Write>(curve: &PrCurve, mut out: W) -> Result<()> {
    writeln!(out, "rank,precision,recall")?;
    for p in &curve.points {
        writeln!(out, "{},{},{}", p.rank, p.precision, p.recall)?;
    }
    out.flush()?;
    Ok(())
}
