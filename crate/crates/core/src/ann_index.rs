//! Forest of randomly rotated kd-trees for approximate k-nearest-neighbor
//! search, plus the exhaustive scan used as its oracle.
//!
//! Each tree rotates the point set by its own seeded orthonormal matrix and
//! splits at the median of the rotated coordinate with the largest spread.
//! Queries run best-bin-first over all trees at once: one priority queue of
//! unexplored branches ordered by their exact lower-bound distance, one
//! shared result heap, and a budget on the number of leaves that contribute
//! unexamined points.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{Reader, Writer};
use crate::error::{NdvrError, Result};

pub const MAGIC: &[u8; 4] = b"NDIX";

pub const DEFAULT_NUM_TREES: usize = 8;
pub const DEFAULT_LEAF_SIZE: usize = 16;

/// Default leaf budget, `8 * k * num_trees`.
pub fn default_budget(k: usize, num_trees: usize) -> usize {
    8 * k * num_trees
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub video_id: String,
    /// Position of the point in the indexed collection.
    pub index: usize,
    pub distance: f64,
}

/// Ascending by distance, ties by video id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub entries: Vec<Neighbor>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|n| n.video_id.as_str())
    }

    pub fn truncated(&self, k: usize) -> NeighborList {
        NeighborList {
            entries: self.entries.iter().take(k).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexParams {
    pub num_trees: usize,
    pub leaf_size: usize,
    pub seed: u64,
    /// When false every tree uses the identity, giving plain kd-trees.
    pub random_rotation: bool,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            num_trees: DEFAULT_NUM_TREES,
            leaf_size: DEFAULT_LEAF_SIZE,
            seed: 0,
            random_rotation: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Node {
    Split { dim: u32, value: f64, left: u32, right: u32 },
    /// Half-open range into the tree's permutation.
    Leaf { start: u32, end: u32 },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    /// `dim x dim`, applied as `rotation * x`.
    rotation: DMatrix<f64>,
    nodes: Vec<Node>,
    perm: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    dim: usize,
    ids: Vec<String>,
    /// Row-major `N x dim`, kept at float32 precision so that the persisted
    /// index answers exactly like the in-memory one.
    points: Vec<f32>,
    trees: Vec<Tree>,
    leaf_size: usize,
    seed: u64,
}

/// Orthonormal `dim x dim` matrix from the QR factorization of a seeded
/// Gaussian matrix, with column signs fixed by `diag(R) > 0`.
pub fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let gaussian = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    let qr = gaussian.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - y;
            d * d
        })
        .sum()
}

fn rotate(rotation: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let dim = x.len();
    (0..dim)
        .map(|i| (0..dim).map(|j| rotation[(i, j)] * x[j]).sum())
        .collect()
}

fn check_points<V: AsRef<[f64]>>(points: &[V], ids: &[String]) -> Result<usize> {
    if points.is_empty() {
        return Err(NdvrError::Parameter("cannot index an empty point set".into()));
    }
    if points.len() != ids.len() {
        return Err(NdvrError::Parameter(format!(
            "{} points but {} ids",
            points.len(),
            ids.len()
        )));
    }
    let dim = points[0].as_ref().len();
    if dim == 0 {
        return Err(NdvrError::Dimension("zero-dimensional points".into()));
    }
    if let Some(i) = points.iter().position(|p| p.as_ref().len() != dim) {
        return Err(NdvrError::Dimension(format!(
            "point {i} has {} dims, expected {dim}",
            points[i].as_ref().len()
        )));
    }
    if points.iter().flat_map(|p| p.as_ref()).any(|x| !x.is_finite()) {
        return Err(NdvrError::Validation("non-finite point coordinate".into()));
    }
    Ok(dim)
}

/// Ordering key for result candidates: distance, then id.
#[derive(Debug, Clone, Copy)]
struct Candidate<'a> {
    sq_dist: f64,
    id: &'a str,
    index: usize,
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate<'_> {}
impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sq_dist
            .total_cmp(&other.sq_dist)
            .then_with(|| self.id.cmp(other.id))
            .then_with(|| self.index.cmp(&other.index))
    }
}

/// Bounded max-heap of the k best candidates.
struct ResultSet<'a> {
    k: usize,
    heap: BinaryHeap<Candidate<'a>>,
}

impl<'a> ResultSet<'a> {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, c: Candidate<'a>) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(worst) = self.heap.peek() {
            if c < *worst {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    /// Squared distance a branch must beat to matter, infinite until full.
    fn worst(&self) -> f64 {
        if self.heap.len() < self.k {
            f64::INFINITY
        } else {
            self.heap.peek().map_or(f64::INFINITY, |c| c.sq_dist)
        }
    }

    fn into_list(self) -> NeighborList {
        let mut v = self.heap.into_vec();
        v.sort();
        NeighborList {
            entries: v
                .into_iter()
                .map(|c| Neighbor {
                    video_id: c.id.to_string(),
                    index: c.index,
                    distance: c.sq_dist.sqrt(),
                })
                .collect(),
        }
    }
}

/// Exhaustive k nearest neighbors by Euclidean distance.
pub fn brute_knn<V: AsRef<[f64]>>(
    points: &[V],
    ids: &[String],
    query: &[f64],
    k: usize,
) -> Result<NeighborList> {
    let dim = check_points(points, ids)?;
    if query.len() != dim {
        return Err(NdvrError::Dimension(format!(
            "query has {} dims, index has {dim}",
            query.len()
        )));
    }
    if k == 0 || k > points.len() {
        return Err(NdvrError::Parameter(format!(
            "k = {k} must be in 1..={}",
            points.len()
        )));
    }
    let mut result = ResultSet::new(k);
    for (i, p) in points.iter().enumerate() {
        let d: f64 = p.as_ref().iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
        result.offer(Candidate {
            sq_dist: d,
            id: &ids[i],
            index: i,
        });
    }
    Ok(result.into_list())
}

/// Pending branch in the best-bin-first queue (min-heap by bound).
struct Branch {
    bound: f64,
    tree: usize,
    node: u32,
    /// Per-dimension offsets from the query to the cell, sparse.
    offsets: Vec<(u32, f64)>,
}

impl PartialEq for Branch {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Branch {}
impl PartialOrd for Branch {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Branch {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Squared offsets slightly shrunk so float rounding never prunes a true tie.
const BOUND_SLACK: f64 = 1.0 - 1e-9;

impl AnnIndex {
    pub fn build<V: AsRef<[f64]>>(points: &[V], ids: &[String], params: &IndexParams) -> Result<Self> {
        let dim = check_points(points, ids)?;
        if params.num_trees == 0 || params.leaf_size == 0 {
            return Err(NdvrError::Parameter(
                "num_trees and leaf_size must be positive".into(),
            ));
        }
        let flat: Vec<f32> = points
            .iter()
            .flat_map(|p| p.as_ref().iter().map(|&x| x as f32))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let trees = (0..params.num_trees)
            .map(|_| {
                let rotation = if params.random_rotation {
                    random_rotation(dim, &mut rng)
                } else {
                    DMatrix::identity(dim, dim)
                };
                build_tree(&flat, dim, rotation, params.leaf_size)
            })
            .collect();
        Ok(Self {
            dim,
            ids: ids.to_vec(),
            points: flat,
            trees,
            leaf_size: params.leaf_size,
            seed: params.seed,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rotation(&self, tree: usize) -> &DMatrix<f64> {
        &self.trees[tree].rotation
    }

    /// Every indexed point as f64, in index order.
    pub fn points_f64(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| self.point(i).iter().map(|&x| f64::from(x)).collect())
            .collect()
    }

    /// Point ids in leaf order for one tree; each appears exactly once.
    pub fn tree_permutation(&self, tree: usize) -> &[u32] {
        &self.trees[tree].perm
    }

    /// Exhaustive search over the stored points.
    pub fn brute_knn(&self, query: &[f64], k: usize) -> Result<NeighborList> {
        brute_knn(&self.points_f64(), &self.ids, query, k)
    }

    /// Approximate k nearest neighbors. The search stops after `budget`
    /// leaves that contained at least one not yet examined point, so it is
    /// exact whenever `budget >= N`.
    pub fn knn(&self, query: &[f64], k: usize, budget: usize) -> Result<NeighborList> {
        if query.len() != self.dim {
            return Err(NdvrError::Dimension(format!(
                "query has {} dims, index has {}",
                query.len(),
                self.dim
            )));
        }
        if k == 0 || k > self.len() {
            return Err(NdvrError::Parameter(format!("k = {k} must be in 1..={}", self.len())));
        }
        if budget == 0 {
            return Err(NdvrError::Parameter("budget must be at least 1".into()));
        }

        let rotated: Vec<Vec<f64>> = self.trees.iter().map(|t| rotate(&t.rotation, query)).collect();
        let mut checked = vec![false; self.len()];
        let mut result = ResultSet::new(k);
        let mut queue = BinaryHeap::new();
        for tree in 0..self.trees.len() {
            queue.push(Branch {
                bound: 0.0,
                tree,
                node: 0,
                offsets: Vec::new(),
            });
        }

        let mut leaves_opened = 0usize;
        while let Some(branch) = queue.pop() {
            if leaves_opened >= budget {
                break;
            }
            if branch.bound > result.worst() {
                // Every queued bound is at least this one.
                break;
            }
            let tree = &self.trees[branch.tree];
            let q = &rotated[branch.tree];
            let mut node = branch.node;
            let bound = branch.bound;
            let offsets = branch.offsets;
            loop {
                match tree.nodes[node as usize] {
                    Node::Split { dim, value, left, right } => {
                        let diff = q[dim as usize] - value;
                        let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                        let previous = offsets
                            .iter()
                            .find(|(d, _)| *d == dim)
                            .map_or(0.0, |&(_, o)| o);
                        let far_bound = bound - previous * previous + diff * diff * BOUND_SLACK;
                        if far_bound <= result.worst() {
                            let mut far_offsets = offsets.clone();
                            match far_offsets.iter_mut().find(|(d, _)| *d == dim) {
                                Some(entry) => entry.1 = diff.abs(),
                                None => far_offsets.push((dim, diff.abs())),
                            }
                            queue.push(Branch {
                                bound: far_bound.max(0.0),
                                tree: branch.tree,
                                node: far,
                                offsets: far_offsets,
                            });
                        }
                        node = near;
                    }
                    Node::Leaf { start, end } => {
                        let mut fresh = false;
                        for &p in &tree.perm[start as usize..end as usize] {
                            let p = p as usize;
                            if std::mem::replace(&mut checked[p], true) {
                                continue;
                            }
                            fresh = true;
                            result.offer(Candidate {
                                sq_dist: sq_dist(self.point(p), query),
                                id: &self.ids[p],
                                index: p,
                            });
                        }
                        if fresh {
                            leaves_opened += 1;
                        }
                        break;
                    }
                }
                if leaves_opened >= budget {
                    break;
                }
            }
        }
        Ok(result.into_list())
    }

    pub fn write<W: Write>(&self, sink: W) -> Result<u64> {
        let header = IndexHeader {
            n: self.len(),
            dim: self.dim,
            num_trees: self.trees.len(),
            leaf_size: self.leaf_size,
            seed: self.seed,
            ids: self.ids.clone(),
        };
        let mut w = Writer::new(sink);
        w.preamble(MAGIC, &header)?;
        w.f32s(&self.points)?;
        for tree in &self.trees {
            for v in tree.rotation.transpose().iter() {
                w.f64(*v)?;
            }
            w.u32(tree.nodes.len() as u32)?;
            for node in &tree.nodes {
                match *node {
                    Node::Split { dim, value, left, right } => {
                        w.bytes(&[0])?;
                        w.u32(dim)?;
                        w.f64(value)?;
                        w.u32(left)?;
                        w.u32(right)?;
                    }
                    Node::Leaf { start, end } => {
                        w.bytes(&[1])?;
                        w.u32(start)?;
                        w.u32(end)?;
                    }
                }
            }
            for &p in &tree.perm {
                w.u32(p)?;
            }
        }
        w.finish()
    }

    pub fn read<R: Read>(source: R) -> Result<Self> {
        let mut r = Reader::new(source, "NDIX index");
        let h: IndexHeader = r.preamble(MAGIC)?;
        if h.ids.len() != h.n || h.n == 0 || h.dim == 0 {
            return Err(NdvrError::Format(format!(
                "index header lists {} ids for N = {} at dim {}",
                h.ids.len(),
                h.n,
                h.dim
            )));
        }
        let points = r.f32s(h.n * h.dim, "points")?;
        let mut trees = Vec::with_capacity(h.num_trees);
        for t in 0..h.num_trees {
            let ctx = format!("tree {t}");
            let mut rot = Vec::with_capacity(h.dim * h.dim);
            for _ in 0..h.dim * h.dim {
                rot.push(r.f64(&ctx)?);
            }
            let rotation = DMatrix::from_row_slice(h.dim, h.dim, &rot);
            let count = r.u32(&ctx)? as usize;
            let mut nodes = Vec::with_capacity(count.min(4 * h.n + 1));
            for _ in 0..count {
                let node = match r.u8(&ctx)? {
                    0 => Node::Split {
                        dim: r.u32(&ctx)?,
                        value: r.f64(&ctx)?,
                        left: r.u32(&ctx)?,
                        right: r.u32(&ctx)?,
                    },
                    1 => Node::Leaf {
                        start: r.u32(&ctx)?,
                        end: r.u32(&ctx)?,
                    },
                    other => {
                        return Err(NdvrError::Corrupt(format!("{ctx}: unknown node tag {other}")))
                    }
                };
                nodes.push(node);
            }
            let mut perm = Vec::with_capacity(h.n);
            for _ in 0..h.n {
                perm.push(r.u32(&ctx)?);
            }
            validate_tree(&nodes, &perm, h.n, h.dim).map_err(|e| NdvrError::Corrupt(format!("{ctx}: {e}")))?;
            trees.push(Tree { rotation, nodes, perm });
        }
        r.expect_end()?;
        Ok(Self {
            dim: h.dim,
            ids: h.ids,
            points,
            trees,
            leaf_size: h.leaf_size,
            seed: h.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<u64> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

fn validate_tree(nodes: &[Node], perm: &[u32], n: usize, dim: usize) -> std::result::Result<(), String> {
    if nodes.is_empty() {
        return Err("no nodes".into());
    }
    let mut seen = vec![false; n];
    for &p in perm {
        let p = p as usize;
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(format!("bad permutation entry {p}"));
        }
    }
    for node in nodes {
        match *node {
            Node::Split { dim: d, left, right, .. } => {
                if d as usize >= dim || left as usize >= nodes.len() || right as usize >= nodes.len() {
                    return Err("split node out of range".into());
                }
            }
            Node::Leaf { start, end } => {
                if start > end || end as usize > n {
                    return Err("leaf range out of bounds".into());
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    #[serde(rename = "N")]
    n: usize,
    dim: usize,
    num_trees: usize,
    leaf_size: usize,
    seed: u64,
    ids: Vec<String>,
}

fn build_tree(points: &[f32], dim: usize, rotation: DMatrix<f64>, leaf_size: usize) -> Tree {
    let n = points.len() / dim;
    let mut rotated = vec![0.0f64; n * dim];
    for i in 0..n {
        let p: Vec<f64> = points[i * dim..(i + 1) * dim].iter().map(|&x| f64::from(x)).collect();
        rotated[i * dim..(i + 1) * dim].copy_from_slice(&rotate(&rotation, &p));
    }
    let mut perm: Vec<u32> = (0..n as u32).collect();
    let mut nodes = Vec::new();
    split(&rotated, dim, &mut perm, 0, leaf_size, &mut nodes);
    Tree { rotation, nodes, perm }
}

/// Builds the subtree over `perm[..]` (which starts at `offset` in the full
/// permutation) and returns its node id.
fn split(
    rotated: &[f64],
    dim: usize,
    perm: &mut [u32],
    offset: usize,
    leaf_size: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let id = nodes.len() as u32;
    let leaf = Node::Leaf {
        start: offset as u32,
        end: (offset + perm.len()) as u32,
    };
    if perm.len() <= leaf_size {
        nodes.push(leaf);
        return id;
    }
    let coord = |p: u32, d: usize| rotated[p as usize * dim + d];
    let mut best_dim = 0;
    let mut best_spread = 0.0;
    for d in 0..dim {
        let (lo, hi) = perm.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
            let v = coord(p, d);
            (lo.min(v), hi.max(v))
        });
        if hi - lo > best_spread {
            best_spread = hi - lo;
            best_dim = d;
        }
    }
    if best_spread <= 0.0 {
        // All points coincide.
        nodes.push(leaf);
        return id;
    }
    let mid = perm.len() / 2;
    perm.select_nth_unstable_by(mid, |&a, &b| {
        coord(a, best_dim).total_cmp(&coord(b, best_dim)).then(a.cmp(&b))
    });
    let value = coord(perm[mid], best_dim);
    // Points left of mid are <= value and right of it >= value; a query
    // exactly on the plane descends right, and the far side is still queued.
    nodes.push(Node::Split {
        dim: best_dim as u32,
        value,
        left: 0,
        right: 0,
    });
    let (lo, hi) = perm.split_at_mut(mid);
    let left = split(rotated, dim, lo, offset, leaf_size, nodes);
    let right = split(rotated, dim, hi, offset + mid, leaf_size, nodes);
    nodes[id as usize] = Node::Split {
        dim: best_dim as u32,
        value,
        left,
        right,
    };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i:05}")).collect()
    }

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| f64::from(rng.random_range(-1.0f32..1.0))).collect())
            .collect()
    }

    #[test]
    fn single_point() {
        let pts = vec![vec![0.5, -0.5]];
        let idx = AnnIndex::build(&pts, &ids(1), &IndexParams::default()).unwrap();
        for t in 0..idx.num_trees() {
            assert_eq!(idx.trees[t].nodes.len(), 1);
        }
        let nn = idx.knn(&[3.0, 3.0], 1, 1).unwrap();
        assert_eq!(nn.entries[0].video_id, "v00000");
    }

    #[test]
    fn identity_rotation_is_plain_kd_tree() {
        let pts = random_points(200, 3, 1);
        let params = IndexParams {
            num_trees: 1,
            random_rotation: false,
            ..IndexParams::default()
        };
        let idx = AnnIndex::build(&pts, &ids(200), &params).unwrap();
        assert_eq!(idx.rotation(0), &DMatrix::identity(3, 3));
        if let Node::Split { dim, value, .. } = idx.trees[0].nodes[0] {
            // Root splits the raw coordinate of largest spread at its median.
            let mut col: Vec<f64> = pts.iter().map(|p| p[dim as usize]).collect();
            col.sort_by(f64::total_cmp);
            assert_eq!(value, col[100]);
        } else {
            panic!("root should split");
        }
        let q = [0.1, 0.2, 0.3];
        assert_eq!(idx.knn(&q, 5, 200).unwrap(), brute_knn(&pts, &ids(200), &q, 5).unwrap());
    }

    #[test]
    fn same_seed_same_forest() {
        let pts = random_points(300, 6, 2);
        let p = IndexParams {
            seed: 42,
            ..IndexParams::default()
        };
        let a = AnnIndex::build(&pts, &ids(300), &p).unwrap();
        let b = AnnIndex::build(&pts, &ids(300), &p).unwrap();
        assert_eq!(a, b);
        let mut wa = Vec::new();
        let mut wb = Vec::new();
        a.write(&mut wa).unwrap();
        b.write(&mut wb).unwrap();
        assert_eq!(wa, wb);
    }

    #[test]
    fn every_point_in_every_tree_once() {
        let pts = random_points(257, 4, 3);
        let idx = AnnIndex::build(&pts, &ids(257), &IndexParams::default()).unwrap();
        for t in 0..idx.num_trees() {
            let mut perm = idx.tree_permutation(t).to_vec();
            perm.sort_unstable();
            assert_eq!(perm, (0..257).collect::<Vec<u32>>());
            let covered: u32 = idx.trees[t]
                .nodes
                .iter()
                .map(|n| match n {
                    Node::Leaf { start, end } => end - start,
                    _ => 0,
                })
                .sum();
            assert_eq!(covered, 257);
        }
    }

    #[test]
    fn rotations_orthonormal_and_distance_preserving() {
        let pts = random_points(20, 16, 4);
        let idx = AnnIndex::build(&pts, &ids(20), &IndexParams::default()).unwrap();
        for t in 0..idx.num_trees() {
            let r = idx.rotation(t);
            let gram = r.transpose() * r;
            assert!((gram - DMatrix::identity(16, 16)).abs().max() < 1e-8);
            for a in 0..5 {
                for b in a + 1..5 {
                    let before: f64 = pts[a].iter().zip(&pts[b]).map(|(x, y)| (x - y).powi(2)).sum();
                    let ra = rotate(r, &pts[a]);
                    let rb = rotate(r, &pts[b]);
                    let after: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
                    assert!((before.sqrt() - after.sqrt()).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn brute_examples() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        let nn = brute_knn(&pts, &ids(3), &[0.6], 2).unwrap();
        assert_eq!(nn.ids().collect::<Vec<_>>(), vec!["v00001", "v00000"]);
        let two = brute_knn(&pts[..2], &ids(2), &[0.8], 1).unwrap();
        assert_eq!(two.entries[0].video_id, "v00001");
        // Equidistant: ordered by id.
        let tie = brute_knn(&[vec![1.0], vec![-1.0]], &["b".into(), "a".into()], &[0.0], 2).unwrap();
        assert_eq!(tie.ids().collect::<Vec<_>>(), vec!["a", "b"]);
        assert!(matches!(brute_knn(&pts, &ids(3), &[0.0], 4), Err(NdvrError::Parameter(_))));
    }

    #[test]
    fn query_on_indexed_point() {
        let pts = random_points(100, 8, 5);
        let idx = AnnIndex::build(&pts, &ids(100), &IndexParams::default()).unwrap();
        let nn = idx.knn(&pts[37], 3, 10).unwrap();
        assert_eq!(nn.entries[0].index, 37);
        assert_eq!(nn.entries[0].distance, 0.0);
    }

    #[test]
    fn parameter_errors() {
        let pts = random_points(10, 2, 6);
        let idx = AnnIndex::build(&pts, &ids(10), &IndexParams::default()).unwrap();
        assert!(matches!(idx.knn(&[0.0, 0.0], 11, 10), Err(NdvrError::Parameter(_))));
        assert!(matches!(idx.knn(&[0.0, 0.0], 1, 0), Err(NdvrError::Parameter(_))));
        assert!(matches!(idx.knn(&[0.0], 1, 1), Err(NdvrError::Dimension(_))));
        let bad = vec![vec![0.0, 1.0], vec![0.0]];
        assert!(matches!(
            AnnIndex::build(&bad, &ids(2), &IndexParams::default()),
            Err(NdvrError::Dimension(_))
        ));
    }

    #[test]
    fn recall_grows_with_budget() {
        let pts = random_points(2000, 32, 7);
        let idx = AnnIndex::build(&pts, &ids(2000), &IndexParams::default()).unwrap();
        let queries = random_points(20, 32, 8);
        let recall = |budget: usize| -> f64 {
            queries
                .iter()
                .map(|q| {
                    let exact: Vec<usize> = idx.brute_knn(q, 10).unwrap().entries.iter().map(|n| n.index).collect();
                    let approx = idx.knn(q, 10, budget).unwrap();
                    approx.entries.iter().filter(|n| exact.contains(&n.index)).count() as f64 / 10.0
                })
                .sum::<f64>()
                / queries.len() as f64
        };
        let budgets = [1, 4, 16, 64, 2000];
        let recalls: Vec<f64> = budgets.iter().map(|&b| recall(b)).collect();
        assert!(recalls.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{recalls:?}");
        assert_eq!(*recalls.last().unwrap(), 1.0);
    }

    #[test]
    fn persisted_index_answers_identically() {
        let pts = random_points(150, 5, 9);
        let idx = AnnIndex::build(&pts, &ids(150), &IndexParams::default()).unwrap();
        let mut buf = Vec::new();
        idx.write(&mut buf).unwrap();
        let back = AnnIndex::read(buf.as_slice()).unwrap();
        assert_eq!(back, idx);
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(AnnIndex::read(truncated), Err(NdvrError::Corrupt(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn full_budget_equals_brute(n in 1usize..200, dim in 1usize..12, seed in any::<u64>(), k_frac in 0.0f64..1.0) {
            let pts = random_points(n, dim, seed);
            // Duplicate a few points so distance ties occur.
            let mut pts = pts;
            if n > 4 { pts[1] = pts[0].clone(); pts[3] = pts[2].clone(); }
            let names = ids(n);
            let params = IndexParams { seed, leaf_size: 1 + (seed % 8) as usize, num_trees: 1 + (seed % 4) as usize, ..IndexParams::default() };
            let idx = AnnIndex::build(&pts, &names, &params).unwrap();
            let k = 1 + ((n - 1) as f64 * k_frac) as usize;
            let q = random_points(1, dim, seed ^ 0xabcdef).pop().unwrap();
            prop_assert_eq!(idx.knn(&q, k, n).unwrap(), brute_knn(&pts, &names, &q, k).unwrap());
        }
    }
}
