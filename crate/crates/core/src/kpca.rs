//! Kernel PCA with a Gaussian (RBF) kernel `exp(-|x - x'|^2 / (2 sigma^2))`.
//!
//! The model keeps its training points ("landmarks"), the column means of the
//! training kernel matrix for centering out-of-sample kernel rows, and the
//! eigenvectors of the double-centered kernel scaled by `1 / sqrt(lambda)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Reader, Writer};
use crate::error::{NdvrError, Result};

pub const MAGIC: &[u8; 4] = b"NDKP";

pub const DEFAULT_OUT_DIM: usize = 256;

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const EIGEN_TOLERANCE: f64 = 1e-10;

/// Pair count above which `median_sigma` subsamples.
const MEDIAN_MAX_PAIRS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct KpcaModel {
    /// `T x input_dim`, one training descriptor per row.
    pub landmarks: DMatrix<f64>,
    pub sigma: f64,
    /// `T x d`, column j is `v_j / sqrt(lambda_j)`.
    pub alphas: DMatrix<f64>,
    /// Descending, strictly positive.
    pub eigenvalues: Vec<f64>,
    /// Column means of the uncentered training kernel.
    pub kernel_col_means: Vec<f64>,
    pub kernel_grand_mean: f64,
}

/// What `fit` does when fewer than `out_dim` components clear the tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankPolicy {
    Strict,
    /// Keep what is available and log a warning.
    Shrink,
}

fn rbf(sq_dist: f64, sigma: f64) -> f64 {
    (-sq_dist / (2.0 * sigma * sigma)).exp()
}

fn sq_norms(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter().map(|r| r.norm_squared()).collect()
}

/// Squared Euclidean distances between rows of `a` and rows of `b`.
fn sq_distances(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let na = sq_norms(a);
    let nb = sq_norms(b);
    let mut g = a * b.transpose();
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            g[(i, j)] = (na[i] + nb[j] - 2.0 * g[(i, j)]).max(0.0);
        }
    }
    g
}

/// `K - 1K - K1 + 1K1` with `1` the all-`1/T` matrix.
pub fn double_center(kernel: &DMatrix<f64>) -> DMatrix<f64> {
    let t = kernel.nrows();
    let col_means: Vec<f64> = kernel.column_iter().map(|c| c.mean()).collect();
    let row_means: Vec<f64> = kernel.row_iter().map(|r| r.mean()).collect();
    let grand = col_means.iter().sum::<f64>() / t as f64;
    DMatrix::from_fn(t, kernel.ncols(), |i, j| {
        kernel[(i, j)] - row_means[i] - col_means[j] + grand
    })
}

pub fn rows_to_matrix<V: AsRef<[f64]>>(rows: &[V]) -> Result<DMatrix<f64>> {
    let dim = rows.first().map_or(0, |r| r.as_ref().len());
    if rows.iter().any(|r| r.as_ref().len() != dim) {
        return Err(NdvrError::Dimension("rows have differing lengths".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i].as_ref()[j]))
}

/// RBF kernel matrix of the rows of `x`.
pub fn kernel_matrix(x: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    sq_distances(x, x).map(|d| rbf(d, sigma))
}

impl KpcaModel {
    /// Fits with [`RankPolicy::Strict`].
    pub fn fit<V: AsRef<[f64]>>(training: &[V], sigma: f64, out_dim: usize) -> Result<Self> {
        Self::fit_with_policy(training, sigma, out_dim, RankPolicy::Strict)
    }

    pub fn fit_with_policy<V: AsRef<[f64]>>(
        training: &[V],
        sigma: f64,
        out_dim: usize,
        policy: RankPolicy,
    ) -> Result<Self> {
        let x = rows_to_matrix(training)?;
        let t = x.nrows();
        if out_dim == 0 || t <= out_dim {
            return Err(NdvrError::Parameter(format!(
                "kernel PCA needs more training points ({t}) than components ({out_dim}), and at least one component"
            )));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(NdvrError::Parameter(format!("sigma must be positive, got {sigma}")));
        }

        let kernel = kernel_matrix(&x, sigma);
        let kernel_col_means: Vec<f64> = kernel.column_iter().map(|c| c.mean()).collect();
        let kernel_grand_mean = kernel_col_means.iter().sum::<f64>() / t as f64;
        let centered = double_center(&kernel);

        let eigen = SymmetricEigen::new(centered);
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]).then(a.cmp(&b)));

        let largest = eigen.eigenvalues[order[0]];
        let achievable = if largest > 0.0 {
            order
                .iter()
                .take_while(|&&i| eigen.eigenvalues[i] > EIGEN_TOLERANCE * largest)
                .count()
        } else {
            0
        };
        let d = if achievable >= out_dim {
            out_dim
        } else {
            match policy {
                RankPolicy::Shrink if achievable > 0 => {
                    warn!("kernel PCA: only {achievable} of {out_dim} components above tolerance, shrinking");
                    achievable
                }
                _ => {
                    return Err(NdvrError::RankDeficient {
                        requested: out_dim,
                        achievable,
                    })
                }
            }
        };

        let mut alphas = DMatrix::zeros(t, d);
        let mut eigenvalues = Vec::with_capacity(d);
        for (j, &src) in order.iter().take(d).enumerate() {
            let lambda = eigen.eigenvalues[src];
            let mut v: DVector<f64> = eigen.eigenvectors.column(src).into_owned();
            // Sign convention: largest-magnitude entry positive (first one on ties).
            let pivot = v
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |best, (i, &x)| if x.abs() > best.1 { (i, x.abs()) } else { best })
                .0;
            if v[pivot] < 0.0 {
                v.neg_mut();
            }
            alphas.set_column(j, &(v / lambda.sqrt()));
            eigenvalues.push(lambda);
        }

        Ok(Self {
            landmarks: x,
            sigma,
            alphas,
            eigenvalues,
            kernel_col_means,
            kernel_grand_mean,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn input_dim(&self) -> usize {
        self.landmarks.ncols()
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmarks.nrows()
    }

    /// Projections of the training points as given by the eigendecomposition,
    /// `sqrt(lambda_j) * v_j`, i.e. `alpha_j * lambda_j`. `T x d`.
    pub fn fitted_projections(&self) -> DMatrix<f64> {
        let mut p = self.alphas.clone();
        for (j, &lambda) in self.eigenvalues.iter().enumerate() {
            p.column_mut(j).scale_mut(lambda);
        }
        p
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.transform_batch(&[x])?.pop().expect("one row in, one row out"))
    }

    /// Projects each row; rows must have landmark dimensionality.
    pub fn transform_batch<V: AsRef<[f64]>>(&self, rows: &[V]) -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = rows_to_matrix(rows)?;
        if x.ncols() != self.input_dim() {
            return Err(NdvrError::Dimension(format!(
                "kernel PCA expects {}-dim input, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut k = sq_distances(&x, &self.landmarks).map(|d| rbf(d, self.sigma));
        for mut row in k.row_iter_mut() {
            let mean = row.mean();
            for (v, &col_mean) in row.iter_mut().zip(&self.kernel_col_means) {
                *v += self.kernel_grand_mean - mean - col_mean;
            }
        }
        let y = k * &self.alphas;
        Ok(y.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    pub fn write<W: Write>(&self, sink: W) -> Result<u64> {
        let header = ModelHeader {
            t: self.num_landmarks(),
            d: self.out_dim(),
            sigma: self.sigma,
            input_dim: self.input_dim(),
        };
        let mut w = Writer::new(sink);
        w.preamble(MAGIC, &header)?;
        // Row-major so a reader can stream landmarks one at a time.
        let landmarks: Vec<f64> = self.landmarks.transpose().iter().copied().collect();
        w.f64s_as_f32(&landmarks)?;
        let alphas: Vec<f64> = self.alphas.transpose().iter().copied().collect();
        w.f64s_as_f32(&alphas)?;
        w.f64s_as_f32(&self.eigenvalues)?;
        w.f64s_as_f32(&self.kernel_col_means)?;
        w.f64s_as_f32(&[self.kernel_grand_mean])?;
        w.finish()
    }

    pub fn read<R: Read>(source: R) -> Result<Self> {
        let mut r = Reader::new(source, "kernel PCA model");
        let h: ModelHeader = r.preamble(MAGIC)?;
        if h.d == 0 || h.t <= h.d || h.sigma.is_nan() || h.sigma <= 0.0 {
            return Err(NdvrError::Format(format!("implausible model header {h:?}")));
        }
        let landmarks = DMatrix::from_row_slice(h.t, h.input_dim, &r.f32s_as_f64(h.t * h.input_dim, "landmarks")?);
        let alphas = DMatrix::from_row_slice(h.t, h.d, &r.f32s_as_f64(h.t * h.d, "alphas")?);
        let eigenvalues = r.f32s_as_f64(h.d, "eigenvalues")?;
        let kernel_col_means = r.f32s_as_f64(h.t, "centering statistics")?;
        let kernel_grand_mean = r.f32s_as_f64(1, "centering statistics")?[0];
        r.expect_end()?;
        Ok(Self {
            landmarks,
            sigma: h.sigma,
            alphas,
            eigenvalues,
            kernel_col_means,
            kernel_grand_mean,
        })
    }

    pub fn save(&self, path: &Path) -> Result<u64> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    #[serde(rename = "T")]
    t: usize,
    d: usize,
    sigma: f64,
    input_dim: usize,
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    values.sort_by(f64::total_cmp);
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// The `p`-th pair `(i, j)`, `i < j < n`, in row-major upper-triangle order.
fn upper_triangle_pair(n: usize, p: usize) -> (usize, usize) {
    let mut i = 0;
    let mut rest = p;
    while rest >= n - 1 - i {
        rest -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + rest)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Median pairwise Euclidean distance, over all pairs or a seeded uniform
/// sample of 10^4 of them. If more than half the sampled pairs coincide, the
/// median of the non-zero distances is used instead.
pub fn median_sigma<V: AsRef<[f64]>>(sample: &[V], seed: u64) -> Result<f64> {
    let n = sample.len();
    if n < 2 {
        return Err(NdvrError::DegenerateSample("need at least two rows".into()));
    }
    let dim = sample[0].as_ref().len();
    if sample.iter().any(|r| r.as_ref().len() != dim) {
        return Err(NdvrError::Dimension("rows have differing lengths".into()));
    }
    let total_pairs = n * (n - 1) / 2;
    let mut distances: Vec<f64> = if total_pairs <= MEDIAN_MAX_PAIRS {
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| euclidean(sample[i].as_ref(), sample[j].as_ref()))
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks: Vec<usize> = index::sample(&mut rng, total_pairs, MEDIAN_MAX_PAIRS).into_vec();
        picks.sort_unstable();
        picks
            .into_iter()
            .map(|p| upper_triangle_pair(n, p))
            .map(|(i, j)| euclidean(sample[i].as_ref(), sample[j].as_ref()))
            .collect()
    };
    let m = median(&mut distances);
    if m > 0.0 {
        return Ok(m);
    }
    let mut nonzero: Vec<f64> = distances.into_iter().filter(|&d| d > 0.0).collect();
    if nonzero.is_empty() {
        return Err(NdvrError::DegenerateSample("all sampled rows are identical".into()));
    }
    Ok(median(&mut nonzero))
}

/// Seeded uniform subsample of at most `max` rows, returned in original order.
pub fn training_sample<V: Clone>(rows: &[V], max: usize, seed: u64) -> Vec<V> {
    if rows.len() <= max {
        return rows.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, rows.len(), max).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| rows[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn identical_points_are_rank_deficient() {
        let rows = vec![vec![1.0, 2.0]; 5];
        match KpcaModel::fit(&rows, 1.0, 2) {
            Err(NdvrError::RankDeficient { requested, achievable }) => {
                assert_eq!((requested, achievable), (2, 0));
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn shrink_policy_keeps_available_rank() {
        // Two distinct points: centered kernel has rank 1.
        let rows = vec![vec![0.0], vec![0.0], vec![1.0], vec![1.0]];
        assert!(matches!(
            KpcaModel::fit(&rows, 1.0, 2),
            Err(NdvrError::RankDeficient { achievable: 1, .. })
        ));
        let m = KpcaModel::fit_with_policy(&rows, 1.0, 2, RankPolicy::Shrink).unwrap();
        assert_eq!(m.out_dim(), 1);
    }

    #[test]
    fn too_few_points() {
        let rows = random_rows(3, 2, 1);
        assert!(matches!(KpcaModel::fit(&rows, 1.0, 3), Err(NdvrError::Parameter(_))));
        assert!(matches!(KpcaModel::fit(&rows, 0.0, 1), Err(NdvrError::Parameter(_))));
    }

    #[test]
    fn triangle_centering_rows_sum_to_zero() {
        let rows = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.3, 0.8]];
        let x = rows_to_matrix(&rows).unwrap();
        let c = double_center(&kernel_matrix(&x, 0.7));
        for r in c.row_iter() {
            assert!(r.sum().abs() < 1e-10);
        }
        for col in c.column_iter() {
            assert!(col.sum().abs() < 1e-10);
        }
        let m = KpcaModel::fit(&rows, 0.7, 2).unwrap();
        assert_eq!(m.out_dim(), 2);
        assert!(m.eigenvalues[0] >= m.eigenvalues[1] && m.eigenvalues[1] > 0.0);
    }

    #[test]
    fn transform_of_landmark_matches_fit() {
        let rows = random_rows(60, 5, 2);
        let m = KpcaModel::fit(&rows, 0.9, 10).unwrap();
        let fitted = m.fitted_projections();
        let projected = m.transform_batch(&rows).unwrap();
        for (i, p) in projected.iter().enumerate() {
            for j in 0..10 {
                assert!((p[j] - fitted[(i, j)]).abs() < 1e-8, "({i},{j})");
            }
        }
    }

    #[test]
    fn far_point_projects_like_kernel_mean() {
        // k(x, .) -> 0, so the centered row tends to grand_mean - col_means.
        let rows = random_rows(30, 3, 3);
        let m = KpcaModel::fit(&rows, 0.2, 4).unwrap();
        let far = m.transform(&[100.0, 100.0, 100.0]).unwrap();
        let limit: Vec<f64> = (0..4)
            .map(|j| {
                (0..30)
                    .map(|i| (m.kernel_grand_mean - m.kernel_col_means[i]) * m.alphas[(i, j)])
                    .sum()
            })
            .collect();
        for (a, b) in far.iter().zip(&limit) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let rows = random_rows(10, 3, 4);
        let m = KpcaModel::fit(&rows, 1.0, 2).unwrap();
        assert!(matches!(m.transform(&[1.0, 2.0]), Err(NdvrError::Dimension(_))));
    }

    #[test]
    fn deterministic_fit() {
        let rows = random_rows(40, 4, 5);
        assert_eq!(
            KpcaModel::fit(&rows, 0.8, 6).unwrap(),
            KpcaModel::fit(&rows, 0.8, 6).unwrap()
        );
    }

    #[test]
    fn persisted_model_round_trips_at_f32() {
        let rows = random_rows(20, 3, 6);
        let m = KpcaModel::fit(&rows, 0.8, 4).unwrap();
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let back = KpcaModel::read(buf.as_slice()).unwrap();
        assert_eq!(back.out_dim(), 4);
        assert_eq!(back.sigma, m.sigma);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(buf, again);
        let a = m.transform(&rows[0]).unwrap();
        let b = back.transform(&rows[0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-3 * (1.0 + x.abs()));
        }
        buf[0] = b'X';
        assert!(matches!(KpcaModel::read(buf.as_slice()), Err(NdvrError::Format(_))));
    }

    #[test]
    fn median_sigma_examples() {
        assert_eq!(median_sigma(&[vec![0.0, 0.0], vec![2.0, 0.0]], 0).unwrap(), 2.0);
        assert_eq!(median_sigma(&[vec![0.0], vec![1.0], vec![2.0]], 0).unwrap(), 1.0);
        assert!(matches!(
            median_sigma(&vec![vec![1.0, 1.0]; 3], 0),
            Err(NdvrError::DegenerateSample(_))
        ));
        let unit: Vec<Vec<f64>> = random_rows(300, 8, 7)
            .into_iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.into_iter().map(|x| x / n).collect()
            })
            .collect();
        // 300 rows = 44850 pairs, exercises the subsampled path.
        let s = median_sigma(&unit, 11).unwrap();
        assert!(s > 0.0 && s <= 2.0);
        assert_eq!(s, median_sigma(&unit, 11).unwrap());
    }

    #[test]
    fn pair_enumeration_matches_subsample_order() {
        for n in 2..12 {
            let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
            for (p, &expected) in pairs.iter().enumerate() {
                assert_eq!(upper_triangle_pair(n, p), expected, "n={n} p={p}");
            }
        }
        let rows = random_rows(5, 2, 8);
        let mut d: Vec<f64> = (0..5)
            .flat_map(|i| (i + 1..5).map(move |j| (i, j)))
            .map(|(i, j)| euclidean(&rows[i], &rows[j]))
            .collect();
        assert_eq!(median_sigma(&rows, 0).unwrap(), median(&mut d));
    }

    #[test]
    fn median_sigma_subsampled_is_seeded() {
        let rows = random_rows(200, 3, 9);
        let a = median_sigma(&rows, 1).unwrap();
        assert_eq!(a, median_sigma(&rows, 1).unwrap());
        assert!(a > 0.0);
    }

    #[test]
    fn training_sample_is_seeded_subset() {
        let rows: Vec<usize> = (0..100).collect();
        let a = training_sample(&rows, 10, 3);
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, training_sample(&rows, 10, 3));
        assert_eq!(training_sample(&rows, 200, 3), rows);
    }
}
