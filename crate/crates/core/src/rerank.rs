//! Neighbourhood re-ranking across the two feature levels.
//!
//! Each video's k nearest neighbours at one level become a sparse indicator
//! over gallery positions. The fc and conv indicators are fused into a
//! positive set (intersection) and a negative set (union), and videos are
//! compared by the mean Jaccard similarity of those two sets.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::ann_index::NeighborList;
use crate::error::{NdvrError, Result};
use crate::eval::RankedResult;

/// Gallery ids with their positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    ids: Vec<String>,
    positions: HashMap<String, usize>,
}

impl Gallery {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(NdvrError::Validation(format!("duplicate gallery id {id}")));
            }
        }
        Ok(Self { ids, positions })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationVector {
    pub gallery_size: usize,
    /// Sorted, unique, each `< gallery_size`.
    pub nonzero: Vec<usize>,
}

impl ActivationVector {
    pub fn from_positions(gallery_size: usize, mut positions: Vec<usize>) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if let Some(&p) = positions.last() {
            if p >= gallery_size {
                return Err(NdvrError::Mapping(format!(
                    "position {p} outside gallery of size {gallery_size}"
                )));
            }
        }
        Ok(Self { gallery_size, nonzero: positions })
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.gallery_size];
        for &i in &self.nonzero {
            dense[i] = 1.0;
        }
        dense
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedActivations {
    pub ps: ActivationVector,
    pub ns: ActivationVector,
}

/// Indicator of the first `k` neighbours.
pub fn activation(neighbors: &NeighborList, k: usize, gallery: &Gallery) -> Result<ActivationVector> {
    let positions = neighbors
        .ids()
        .take(k)
        .map(|id| {
            gallery
                .position(id)
                .ok_or_else(|| NdvrError::Mapping(format!("neighbour {id} is not in the gallery")))
        })
        .collect::<Result<Vec<_>>>()?;
    ActivationVector::from_positions(gallery.len(), positions)
}

fn check_sizes(a: &ActivationVector, b: &ActivationVector) -> Result<()> {
    if a.gallery_size != b.gallery_size {
        return Err(NdvrError::Dimension(format!(
            "activation sizes {} and {} differ",
            a.gallery_size, b.gallery_size
        )));
    }
    Ok(())
}

/// `(|A ∩ B|, |A ∪ B|)` of two sorted sets.
fn overlap(a: &[usize], b: &[usize]) -> (usize, usize) {
    let (mut i, mut j, mut both) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                both += 1;
                i += 1;
                j += 1;
            }
        }
    }
    (both, a.len() + b.len() - both)
}

pub fn fuse(fc: &ActivationVector, conv: &ActivationVector) -> Result<FusedActivations> {
    check_sizes(fc, conv)?;
    let conv_set: HashSet<usize> = conv.nonzero.iter().copied().collect();
    let ps = fc.nonzero.iter().copied().filter(|i| conv_set.contains(i)).collect();
    let ns = fc.nonzero.iter().chain(&conv.nonzero).copied().collect();
    Ok(FusedActivations {
        ps: ActivationVector::from_positions(fc.gallery_size, ps)?,
        ns: ActivationVector::from_positions(fc.gallery_size, ns)?,
    })
}

fn jaccard_ratio(a: &ActivationVector, b: &ActivationVector) -> f64 {
    let (inter, union) = overlap(&a.nonzero, &b.nonzero);
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `1 - (J(PS_q, PS_g) + J(NS_q, NS_g)) / 2`, with `J(∅, ∅) = 1`.
pub fn jaccard_distance(q: &FusedActivations, g: &FusedActivations) -> Result<f64> {
    check_sizes(&q.ps, &g.ps)?;
    check_sizes(&q.ns, &g.ns)?;
    check_sizes(&q.ps, &q.ns)?;
    Ok(1.0 - 0.5 * (jaccard_ratio(&q.ps, &g.ps) + jaccard_ratio(&q.ns, &g.ns)))
}

fn lookup<'a>(lists: &'a HashMap<String, NeighborList>, id: &str, level: &str) -> Result<&'a NeighborList> {
    lists
        .get(id)
        .ok_or_else(|| NdvrError::State(format!("no {level} neighbour list for gallery video {id}")))
}

/// Fused activations of every gallery video, built from its own
/// neighbourhoods at both levels.
#[derive(Debug, Clone)]
pub struct ActivationTable {
    gallery: Gallery,
    k: usize,
    fused: Vec<FusedActivations>,
}

impl ActivationTable {
    pub fn build(
        gallery: Gallery,
        k: usize,
        fc_neighbors: &HashMap<String, NeighborList>,
        conv_neighbors: &HashMap<String, NeighborList>,
    ) -> Result<Self> {
        let fused = gallery
            .ids()
            .iter()
            .map(|id| {
                let fc = activation(lookup(fc_neighbors, id, "fc")?, k, &gallery)?;
                let conv = activation(lookup(conv_neighbors, id, "conv")?, k, &gallery)?;
                fuse(&fc, &conv)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { gallery, k, fused })
    }

    pub fn gallery(&self) -> &Gallery {
        &self.gallery
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, id: &str) -> Option<&FusedActivations> {
        self.gallery.position(id).map(|i| &self.fused[i])
    }

    /// Fuses a query's two neighbour lists against this gallery.
    pub fn query_activations(&self, fc: &NeighborList, conv: &NeighborList) -> Result<FusedActivations> {
        fuse(
            &activation(fc, self.k, &self.gallery)?,
            &activation(conv, self.k, &self.gallery)?,
        )
    }
}

/// Ranks the gallery for one query.
///
/// Videos in the query's negative set are ordered by Jaccard distance; ties
/// are broken by `tie_break` (smaller first, evaluated only for tied videos),
/// then by id. Every other video of `fallback_order` follows in that order
/// with the saturated score 1. The query itself is never ranked.
pub fn rerank<F>(
    query_id: &str,
    query: &FusedActivations,
    table: &ActivationTable,
    fallback_order: &[String],
    mut tie_break: F,
) -> Result<RankedResult>
where
    F: FnMut(&str) -> Result<f64>,
{
    let gallery = table.gallery();
    let mut pool: Vec<(String, f64)> = query
        .ns
        .nonzero
        .iter()
        .map(|&i| gallery.ids()[i].clone())
        .filter(|id| id != query_id)
        .map(|id| {
            let g = table
                .get(&id)
                .ok_or_else(|| NdvrError::State(format!("no activations precomputed for {id}")))?;
            Ok((id, jaccard_distance(query, g)?))
        })
        .collect::<Result<Vec<_>>>()?;
    pool.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));

    let mut ordered: Vec<(String, f64)> = Vec::with_capacity(fallback_order.len().max(pool.len()));
    let mut start = 0;
    while start < pool.len() {
        let end = start + pool[start..].iter().take_while(|e| e.1 == pool[start].1).count();
        if end - start > 1 {
            let mut group = pool[start..end]
                .iter()
                .map(|(id, d)| Ok((tie_break(id)?, id.clone(), *d)))
                .collect::<Result<Vec<_>>>()?;
            group.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
            ordered.extend(group.into_iter().map(|(_, id, d)| (id, d)));
        } else {
            ordered.push(pool[start].clone());
        }
        start = end;
    }

    let in_pool: HashSet<String> = ordered.iter().map(|(id, _)| id.clone()).collect();
    let mut seen = HashSet::new();
    for id in fallback_order {
        if id != query_id && !in_pool.contains(id) && seen.insert(id.as_str()) {
            ordered.push((id.clone(), 1.0));
        }
    }
    Ok(RankedResult::from_ordered(query_id, ordered))
}
