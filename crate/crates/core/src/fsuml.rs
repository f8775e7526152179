//! Frame-specific unsupervised metric learning.
//!
//! For a pair of reduced frame descriptors `q`, `g` the coordinate distance
//! matrix `d(i, j) = |q_i - g_j|` is turned into a Gaussian similarity
//! `W(i, j) = exp(-d(i, j)^2 / (k sigma^2))` and smoothed once by the
//! simplified self-smoothing operator:
//!
//! ```text
//! P  = D^-1 W          D(i, i) = sum_k W(i, k)
//! W1 = W P
//! M* = Delta^-1 W1     Delta(i, i) = W1(i, i)
//! ```
//!
//! so `M*` has a unit diagonal and non-negative entries. The pair distance is
//! the quadratic form of `M*`, see [`QuadraticForm`].

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{NdvrError, Result};

/// Negative quadratic-form values down to this are rounding noise.
const NEGATIVE_SLACK: f64 = -1e-9;

/// Kernel bandwidth. Serialized as `"median"` or a bare number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SigmaRepr", into = "SigmaRepr")]
pub enum SigmaChoice {
    /// Median of the relevant distances.
    Median,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SigmaRepr {
    Number(f64),
    Text(String),
}

impl From<SigmaChoice> for SigmaRepr {
    fn from(s: SigmaChoice) -> Self {
        match s {
            SigmaChoice::Median => SigmaRepr::Text("median".into()),
            SigmaChoice::Fixed(v) => SigmaRepr::Number(v),
        }
    }
}

impl TryFrom<SigmaRepr> for SigmaChoice {
    type Error = NdvrError;

    fn try_from(r: SigmaRepr) -> Result<Self> {
        match r {
            SigmaRepr::Number(v) if v.is_finite() && v > 0.0 => Ok(SigmaChoice::Fixed(v)),
            SigmaRepr::Number(v) => Err(NdvrError::Parameter(format!("sigma must be positive, got {v}"))),
            SigmaRepr::Text(s) => s.parse(),
        }
    }
}

impl fmt::Display for SigmaChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaChoice::Median => f.write_str("median"),
            SigmaChoice::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for SigmaChoice {
    type Err = NdvrError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "median" {
            return Ok(SigmaChoice::Median);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => Ok(SigmaChoice::Fixed(v)),
            _ => Err(NdvrError::Parameter(format!(
                "sigma must be `median` or a positive number, got `{s}`"
            ))),
        }
    }
}

/// Which difference vector enters `delta^T M* delta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuadraticForm {
    /// `delta = q - g`. `M*` is neither symmetric nor PSD, so this can go
    /// negative for dissimilar pairs.
    Signed,
    /// `delta = |q - g|` entrywise. Non-negative because `M* >= 0`; reduces
    /// to squared Euclidean distance when `M* = I`.
    Absolute,
}

impl FromStr for QuadraticForm {
    type Err = NdvrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed" => Ok(QuadraticForm::Signed),
            "absolute" => Ok(QuadraticForm::Absolute),
            other => Err(NdvrError::Parameter(format!("unknown quadratic form `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsoParams {
    /// Kernel-width multiplier.
    pub k: f64,
    pub sigma: SigmaChoice,
    /// Smoothing steps; only a single step is supported.
    pub t: u32,
    pub form: QuadraticForm,
}

pub const DEFAULT_SSO_K: f64 = 32.0;

impl Default for SsoParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_SSO_K,
            sigma: SigmaChoice::Median,
            t: 1,
            form: QuadraticForm::Absolute,
        }
    }
}

impl SsoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(NdvrError::Parameter(format!("sso k must be positive, got {}", self.k)));
        }
        if let SigmaChoice::Fixed(s) = self.sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(NdvrError::Parameter(format!("sso sigma must be positive, got {s}")));
            }
        }
        if self.t != 1 {
            return Err(NdvrError::Parameter(format!(
                "sso smoothing runs exactly one step, got t = {}",
                self.t
            )));
        }
        Ok(())
    }
}

/// The smoothed, self-normalized similarity matrix of one frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix {
    pub m_star: DMatrix<f64>,
}

fn check_pair(q: &[f64], g: &[f64]) -> Result<()> {
    if q.len() != g.len() {
        return Err(NdvrError::Dimension(format!(
            "descriptor lengths differ: {} vs {}",
            q.len(),
            g.len()
        )));
    }
    if q.is_empty() {
        return Err(NdvrError::Dimension("empty descriptors".into()));
    }
    Ok(())
}

/// `out[i][j] = |q_i - g_j|`.
pub fn coordinate_distance_matrix(q: &[f64], g: &[f64]) -> Result<DMatrix<f64>> {
    check_pair(q, g)?;
    if q.iter().chain(g).any(|x| !x.is_finite()) {
        return Err(NdvrError::Validation("non-finite descriptor entry".into()));
    }
    Ok(DMatrix::from_fn(q.len(), g.len(), |i, j| (q[i] - g[j]).abs()))
}

fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (lower, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + upper)
    }
}

/// Bandwidth for a distance matrix. A zero median falls back to the largest
/// entry, and an all-zero matrix to 1 (every similarity is then 1 anyway).
pub fn resolve_sigma(distances: &[f64], choice: SigmaChoice) -> f64 {
    match choice {
        SigmaChoice::Fixed(s) => s,
        SigmaChoice::Median => {
            let mut buf = distances.to_vec();
            let m = median_in_place(&mut buf);
            if m > 0.0 {
                m
            } else {
                let max = distances.iter().copied().fold(0.0, f64::max);
                if max > 0.0 {
                    max
                } else {
                    1.0
                }
            }
        }
    }
}

/// Entrywise `exp(-d^2 / (k sigma^2))`.
pub fn similarity_matrix(dist: &DMatrix<f64>, params: &SsoParams) -> Result<DMatrix<f64>> {
    params.validate()?;
    if dist.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(NdvrError::Validation(
            "distances must be finite and non-negative".into(),
        ));
    }
    let sigma = resolve_sigma(dist.as_slice(), params.sigma);
    let width = params.k * sigma * sigma;
    Ok(dist.map(|d| (-d * d / width).exp()))
}

/// One step of the simplified self-smoothing operator followed by diagonal
/// self-normalization.
pub fn sso_smooth(w: &DMatrix<f64>, params: &SsoParams) -> Result<MetricMatrix> {
    params.validate()?;
    if !w.is_square() {
        return Err(NdvrError::Dimension(format!(
            "similarity matrix must be square, got {}x{}",
            w.nrows(),
            w.ncols()
        )));
    }
    let n = w.nrows();
    let row_sums: Vec<f64> = w.row_iter().map(|r| r.sum()).collect();
    if let Some(i) = row_sums.iter().position(|&s| !(s.is_finite() && s != 0.0)) {
        return Err(NdvrError::Singular(format!("row {i} of W sums to {}", row_sums[i])));
    }
    let p = DMatrix::from_fn(n, n, |i, j| w[(i, j)] / row_sums[i]);

    let mut smoothed = w.clone();
    for _ in 0..params.t {
        smoothed = &smoothed * &p;
    }

    let diag: Vec<f64> = (0..n).map(|i| smoothed[(i, i)]).collect();
    if let Some(i) = diag.iter().position(|&d| !(d.is_finite() && d != 0.0)) {
        return Err(NdvrError::Singular(format!("smoothed diagonal entry {i} is {}", diag[i])));
    }
    for (i, mut row) in smoothed.row_iter_mut().enumerate() {
        row /= diag[i];
    }
    Ok(MetricMatrix { m_star: smoothed })
}

fn quadratic(delta: &[f64], m: &MetricMatrix) -> f64 {
    m.m_star
        .row_iter()
        .zip(delta)
        .map(|(row, &di)| di * row.iter().zip(delta).map(|(mij, dj)| mij * dj).sum::<f64>())
        .sum()
}

fn check_metric(q: &[f64], g: &[f64], m: &MetricMatrix) -> Result<()> {
    check_pair(q, g)?;
    if m.m_star.nrows() != q.len() || m.m_star.ncols() != q.len() {
        return Err(NdvrError::Dimension(format!(
            "{}-dim descriptors against a {}x{} metric",
            q.len(),
            m.m_star.nrows(),
            m.m_star.ncols()
        )));
    }
    Ok(())
}

fn clamp_negative(value: f64) -> Result<f64> {
    if value >= 0.0 {
        Ok(value)
    } else if value > NEGATIVE_SLACK {
        Ok(0.0)
    } else {
        Err(NdvrError::Validation(format!(
            "quadratic form is negative ({value:e}); the metric is indefinite for this pair"
        )))
    }
}

/// `(q - g)^T M* (q - g)`.
pub fn metric_distance(q: &[f64], g: &[f64], m: &MetricMatrix) -> Result<f64> {
    check_metric(q, g, m)?;
    let delta: Vec<f64> = q.iter().zip(g).map(|(a, b)| a - b).collect();
    clamp_negative(quadratic(&delta, m))
}

/// `|q - g|^T M* |q - g|`.
pub fn absolute_metric_distance(q: &[f64], g: &[f64], m: &MetricMatrix) -> Result<f64> {
    check_metric(q, g, m)?;
    let delta: Vec<f64> = q.iter().zip(g).map(|(a, b)| (a - b).abs()).collect();
    clamp_negative(quadratic(&delta, m))
}

/// Full pair pipeline: distance matrix, similarity, smoothing, quadratic form.
///
/// Evaluated without materializing `M*`:
/// `delta^T M* delta = sum_i delta_i / W1(i,i) * (W D^-1 W delta)_i` with
/// `W1(i,i) = sum_k W(i,k) W(k,i) / D(k,k)`, which is O(n^2) instead of the
/// O(n^3) matrix product.
pub fn frame_distance(q: &[f64], g: &[f64], params: &SsoParams) -> Result<f64> {
    Ok(frame_distances(q, g, params, false)?.0)
}

/// `(frame_distance(q, g), frame_distance(g, q))` for the price of little
/// more than one: the reverse pair has the transposed similarity matrix, the
/// same bandwidth and the same quadratic form.
pub fn frame_distance_pair(q: &[f64], g: &[f64], params: &SsoParams) -> Result<(f64, f64)> {
    let (forward, backward) = frame_distances(q, g, params, true)?;
    Ok((forward, backward.expect("reverse direction requested")))
}

fn frame_distances(q: &[f64], g: &[f64], params: &SsoParams, both: bool) -> PairOutput {
    check_pair(q, g)?;
    params.validate()?;
    if q.iter().chain(g).any(|x| !x.is_finite()) {
        return Err(NdvrError::Validation("non-finite descriptor entry".into()));
    }
    let sigma = match params.sigma {
        SigmaChoice::Fixed(s) => s,
        SigmaChoice::Median => pairwise_median_sigma(q, g),
    };
    let scale = -1.0 / (params.k * sigma * sigma);
    SCRATCH.with(|cell| {
        let (w, wt) = &mut *cell.borrow_mut();
        let n2 = q.len() * q.len();
        w.resize(n2, 0.0);
        wt.resize(n2, 0.0);
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the running CPU supports AVX2.
            return unsafe { pair_kernel_avx2(q, g, scale, params.form, both, &mut w[..n2], &mut wt[..n2]) };
        }
        pair_kernel(q, g, scale, params.form, both, &mut w[..n2], &mut wt[..n2])
    })
}

thread_local! {
    /// Reused `W` and `W^T` buffers; fresh large allocations per frame pair
    /// cost more than the arithmetic.
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

type PairOutput = Result<(f64, Option<f64>)>;

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn pair_kernel_avx2(
    q: &[f64],
    g: &[f64],
    scale: f64,
    form: QuadraticForm,
    both: bool,
    w: &mut [f64],
    wt: &mut [f64],
) -> PairOutput {
    pair_kernel(q, g, scale, form, both, w, wt)
}

/// Only IEEE add/mul/div in a fixed order, so every instruction set gives
/// bit-identical results.
#[inline(always)]
fn pair_kernel(
    q: &[f64],
    g: &[f64],
    scale: f64,
    form: QuadraticForm,
    both: bool,
    w: &mut [f64],
    wt: &mut [f64],
) -> PairOutput {
    let n = q.len();
    for (row, &qi) in w.chunks_exact_mut(n).zip(q) {
        for (x, &gj) in row.iter_mut().zip(g) {
            let d = qi - gj;
            *x = exp_nonpositive(d * d * scale);
        }
    }
    const BLOCK: usize = 16;
    for r0 in (0..n).step_by(BLOCK) {
        for c0 in (0..n).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(n) {
                for c in c0..(c0 + BLOCK).min(n) {
                    wt[c * n + r] = w[r * n + c];
                }
            }
        }
    }
    // The form is invariant under delta -> -delta, so both directions share it.
    let delta: Vec<f64> = match form {
        QuadraticForm::Signed => q.iter().zip(g).map(|(a, b)| a - b).collect(),
        QuadraticForm::Absolute => q.iter().zip(g).map(|(a, b)| (a - b).abs()).collect(),
    };
    let forward = directed_form(w, wt, &delta, n)?;
    let backward = if both { Some(directed_form(wt, w, &delta, n)?) } else { None };
    Ok((forward, backward))
}

#[inline(always)]
fn directed_form(w: &[f64], wt: &[f64], delta: &[f64], n: usize) -> Result<f64> {
    let mut inv_sums = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    for (i, row) in w.chunks_exact(n).enumerate() {
        let s = sum8(row);
        if !(s.is_finite() && s != 0.0) {
            return Err(NdvrError::Singular(format!("row {i} of W sums to {s}")));
        }
        inv_sums.push(1.0 / s);
        // u = D^-1 W delta
        u.push(dot8(row, delta) / s);
    }
    let mut total = 0.0;
    for (i, (row, col)) in w.chunks_exact(n).zip(wt.chunks_exact(n)).enumerate() {
        let diag = dot8_3(row, col, &inv_sums);
        if !(diag.is_finite() && diag != 0.0) {
            return Err(NdvrError::Singular(format!("smoothed diagonal entry {i} is {diag}")));
        }
        total += delta[i] * dot8(row, &u) / diag;
    }
    clamp_negative(total)
}

const LANES: usize = 8;

#[inline(always)]
fn fold_lanes(acc: [f64; LANES], tail: f64) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline(always)]
fn sum8(a: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let chunks = a.chunks_exact(LANES);
    let tail: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    fold_lanes(acc, tail)
}

#[inline(always)]
fn dot8(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    fold_lanes(acc, tail)
}

#[inline(always)]
fn dot8_3(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let (ca, cb, cc) = (a.chunks_exact(LANES), b.chunks_exact(LANES), c.chunks_exact(LANES));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .zip(cc.remainder())
        .map(|((x, y), z)| x * y * z)
        .sum();
    for ((x, y), z) in ca.zip(cb).zip(cc) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l] * z[l];
        }
    }
    fold_lanes(acc, tail)
}

/// `exp(x)` for `x <= 0` by range reduction and a degree-13 Taylor
/// polynomial; written without branches in the hot path so it vectorizes.
/// Relative error is within a few ulp; results below `exp(-708)` flush to
/// zero.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFTER: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let underflow = x < -708.0;
    let x = if underflow { -708.0 } else { x };
    let shifted = x * LOG2E + SHIFTER;
    let n = shifted - SHIFTER;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let p = 1.0 / 6_227_020_800.0;
    let p = p * r + 1.0 / 479_001_600.0;
    let p = p * r + 1.0 / 39_916_800.0;
    let p = p * r + 1.0 / 3_628_800.0;
    let p = p * r + 1.0 / 362_880.0;
    let p = p * r + 1.0 / 40_320.0;
    let p = p * r + 1.0 / 5_040.0;
    let p = p * r + 1.0 / 720.0;
    let p = p * r + 1.0 / 120.0;
    let p = p * r + 1.0 / 24.0;
    let p = p * r + 1.0 / 6.0;
    let p = p * r + 0.5;
    let p = p * r + 1.0;
    let p = p * r + 1.0;
    let bits = shifted.to_bits().wrapping_sub(SHIFTER.to_bits()).wrapping_add(1023) << 52;
    let y = p * f64::from_bits(bits);
    if underflow {
        0.0
    } else {
        y
    }
}

/// Median bandwidth of the `n x n` matrix `|q_i - g_j|`, with the same
/// fallbacks as [`resolve_sigma`], computed from sorted copies of `q` and
/// `g` without materializing the matrix. Exact: the selected order
/// statistics are entries of the matrix.
fn pairwise_median_sigma(q: &[f64], g: &[f64]) -> f64 {
    let mut qs = q.to_vec();
    let mut gs = g.to_vec();
    qs.sort_unstable_by(f64::total_cmp);
    gs.sort_unstable_by(f64::total_cmp);
    let total = qs.len() * gs.len();
    let mid = total / 2;
    let m = if total % 2 == 1 {
        kth_pairwise_distances(&qs, &gs, mid, mid).1
    } else {
        let (below, upper) = kth_pairwise_distances(&qs, &gs, mid - 1, mid);
        0.5 * (below + upper)
    };
    if m > 0.0 {
        return m;
    }
    let max = (qs[qs.len() - 1] - gs[0]).abs().max((gs[gs.len() - 1] - qs[0]).abs());
    if max > 0.0 {
        max
    } else {
        1.0
    }
}

/// For each sorted `q_i`, the half-open range of sorted `g` with
/// `|q_i - g_j| <= t`. The ranges move monotonically, so one sweep suffices.
fn sweep_within(qs: &[f64], gs: &[f64], t: f64, mut visit: impl FnMut(usize, usize, usize)) {
    let (mut lo, mut hi) = (0, 0);
    for (i, &x) in qs.iter().enumerate() {
        while lo < gs.len() && gs[lo] < x && x - gs[lo] > t {
            lo += 1;
        }
        hi = hi.max(lo);
        while hi < gs.len() && (gs[hi] <= x || gs[hi] - x <= t) {
            hi += 1;
        }
        visit(i, lo, hi);
    }
}

fn count_within(qs: &[f64], gs: &[f64], t: f64) -> usize {
    let mut count = 0;
    sweep_within(qs, gs, t, |_, lo, hi| count += hi - lo);
    count
}

/// The `k_lo`-th and `k_hi`-th smallest (0-based, `k_lo <= k_hi`) entries
/// of `|q_i - g_j|`. Bisects on the value until the bracket holds few
/// entries, then selects among those exactly.
fn kth_pairwise_distances(qs: &[f64], gs: &[f64], k_lo: usize, k_hi: usize) -> (f64, f64) {
    let small = 8 * qs.len().max(gs.len());
    // Invariant: count(<= lo) <= k_lo (lo = None counts nothing) and
    // count(<= hi) > k_hi.
    let mut lo: Option<(f64, usize)> = None;
    let mut hi = {
        let max = (qs[qs.len() - 1] - gs[0]).abs().max((gs[gs.len() - 1] - qs[0]).abs());
        (max, qs.len() * gs.len())
    };
    loop {
        let (lo_value, lo_count) = lo.unwrap_or((0.0, 0));
        if hi.1 - lo_count <= small {
            break;
        }
        let mid = match lo {
            Some(_) => lo_value + 0.5 * (hi.0 - lo_value),
            None => 0.5 * hi.0,
        };
        if lo.is_some_and(|(v, _)| mid <= v) || mid >= hi.0 {
            break;
        }
        let c = count_within(qs, gs, mid);
        if c > k_hi {
            hi = (mid, c);
        } else if c <= k_lo {
            lo = Some((mid, c));
        } else {
            break;
        }
    }
    // Entries in (lo, hi]; with no lower bound, everything up to hi.
    let mut candidates = Vec::with_capacity(hi.1 - lo.map_or(0, |l| l.1));
    let mut inner = vec![(0usize, 0usize); qs.len()];
    if let Some((v, _)) = lo {
        sweep_within(qs, gs, v, |i, a, b| inner[i] = (a, b));
    }
    sweep_within(qs, gs, hi.0, |i, a, b| {
        let (ia, ib) = if lo.is_some() { inner[i] } else { (a, a) };
        for j in (a..ia).chain(ib.max(a)..b) {
            candidates.push((qs[i] - gs[j]).abs());
        }
    });
    let base = lo.map_or(0, |l| l.1);
    candidates.sort_unstable_by(f64::total_cmp);
    (candidates[k_lo - base], candidates[k_hi - base])
}

/// Mean over query keyframes of the smallest frame distance to any gallery
/// keyframe.
pub fn video_distance<Q, G>(query: &[Q], gallery: &[G], params: &SsoParams) -> Result<f64>
where
    Q: AsRef<[f64]>,
    G: AsRef<[f64]>,
{
    aggregate_best_match(query.len(), gallery.len(), |i, j| {
        frame_distance(query[i].as_ref(), gallery[j].as_ref(), params)
    })
}

/// `(video_distance(a, b), video_distance(b, a))` sharing the frame work.
pub fn video_distance_pair<A, B>(a: &[A], b: &[B], params: &SsoParams) -> Result<(f64, f64)>
where
    A: AsRef<[f64]>,
    B: AsRef<[f64]>,
{
    let mut table = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            table.push(frame_distance_pair(x.as_ref(), y.as_ref(), params)?);
        }
    }
    let nb = b.len();
    let forward = aggregate_best_match(a.len(), nb, |i, j| Ok(table[i * nb + j].0))?;
    let backward = aggregate_best_match(nb, a.len(), |j, i| Ok(table[i * nb + j].1))?;
    Ok((forward, backward))
}

/// Best-match average of an arbitrary `nq x ng` frame-distance table.
pub fn aggregate_best_match<F>(nq: usize, ng: usize, mut frame: F) -> Result<f64>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    if nq == 0 {
        return Err(NdvrError::EmptySignature("query".into()));
    }
    if ng == 0 {
        return Err(NdvrError::EmptySignature("gallery".into()));
    }
    let mut sum = 0.0;
    for i in 0..nq {
        let mut best = f64::INFINITY;
        for j in 0..ng {
            best = best.min(frame(i, j)?);
        }
        sum += best;
    }
    Ok(sum / nq as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(k: f64, sigma: f64) -> SsoParams {
        SsoParams {
            k,
            sigma: SigmaChoice::Fixed(sigma),
            ..SsoParams::default()
        }
    }

    #[test]
    fn distance_matrix_examples() {
        let d = coordinate_distance_matrix(&[1.0, 2.0], &[0.0, 4.0]).unwrap();
        assert_eq!(d, DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 2.0]));
        let q = [0.3, -1.0, 2.5];
        let same = coordinate_distance_matrix(&q, &q).unwrap();
        assert!((0..3).all(|i| same[(i, i)] == 0.0));
        assert!(same.iter().all(|&x| x >= 0.0));
        assert!(matches!(
            coordinate_distance_matrix(&[1.0], &[1.0, 2.0]),
            Err(NdvrError::Dimension(_))
        ));
    }

    #[test]
    fn similarity_examples() {
        let p = params(2.0, 0.5);
        let ones = similarity_matrix(&DMatrix::zeros(3, 3), &p).unwrap();
        assert!(ones.iter().all(|&x| x == 1.0));
        let d = (2.0f64 * 0.25).sqrt();
        let w = similarity_matrix(&DMatrix::from_element(2, 2, d), &p).unwrap();
        assert!(w.iter().all(|&x| (x - (-1.0f64).exp()).abs() < 1e-15));
        assert!(similarity_matrix(&DMatrix::from_element(1, 1, f64::NAN), &p).is_err());
        // Median sigma on an all-zero matrix is still well defined.
        let median = SsoParams::default();
        assert!(similarity_matrix(&DMatrix::zeros(2, 2), &median)
            .unwrap()
            .iter()
            .all(|&x| x == 1.0));
    }

    #[test]
    fn smooth_identity_is_fixed_point() {
        let m = sso_smooth(&DMatrix::identity(4, 4), &SsoParams::default()).unwrap();
        assert_eq!(m.m_star, DMatrix::identity(4, 4));
    }

    #[test]
    fn smooth_all_ones() {
        let m = sso_smooth(&DMatrix::from_element(3, 3, 1.0), &SsoParams::default()).unwrap();
        for x in m.m_star.iter() {
            assert!((x - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn smooth_zero_row_is_singular() {
        let mut w = DMatrix::from_element(3, 3, 1.0);
        w.row_mut(1).fill(0.0);
        assert!(matches!(sso_smooth(&w, &SsoParams::default()), Err(NdvrError::Singular(_))));
    }

    #[test]
    fn t_other_than_one_rejected() {
        let p = SsoParams {
            t: 2,
            ..SsoParams::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn metric_distance_examples() {
        let q = [0.4, -0.2, 1.1];
        let eye = MetricMatrix {
            m_star: DMatrix::identity(3, 3),
        };
        assert_eq!(metric_distance(&q, &q, &eye).unwrap(), 0.0);
        let g = [1.0, 0.0, -1.0];
        let sq: f64 = q.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((metric_distance(&q, &g, &eye).unwrap() - sq).abs() < 1e-12);
        assert!((absolute_metric_distance(&q, &g, &eye).unwrap() - sq).abs() < 1e-12);

        let m = MetricMatrix {
            m_star: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
        };
        assert!((metric_distance(&[1.0, 0.0], &[0.0, 1.0], &m).unwrap() - 1.0).abs() < 1e-15);
        assert!(
            (absolute_metric_distance(&[1.0, 0.0], &[0.0, 1.0], &m).unwrap() - 3.0).abs() < 1e-15
        );
    }

    #[test]
    fn indefinite_signed_form_errors() {
        let m = MetricMatrix {
            m_star: DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]),
        };
        assert!(matches!(
            metric_distance(&[1.0, 0.0], &[0.0, 1.0], &m),
            Err(NdvrError::Validation(_))
        ));
    }

    #[test]
    fn constant_similarity_degenerates_to_sum_squared() {
        // All distances equal -> W constant -> M* all ones -> (sum delta)^2.
        let w = DMatrix::from_element(3, 3, 0.37);
        let m = sso_smooth(&w, &SsoParams::default()).unwrap();
        let q = [0.5, 1.0, -0.25];
        let g = [0.0, 0.25, 0.5];
        let s: f64 = q.iter().zip(&g).map(|(a, b)| a - b).sum();
        assert!((metric_distance(&q, &g, &m).unwrap() - s * s).abs() < 1e-12);
    }

    fn dense_frame_distance(q: &[f64], g: &[f64], p: &SsoParams) -> Result<f64> {
        let d = coordinate_distance_matrix(q, g)?;
        let w = similarity_matrix(&d, p)?;
        let m = sso_smooth(&w, p)?;
        match p.form {
            QuadraticForm::Signed => metric_distance(q, g, &m),
            QuadraticForm::Absolute => absolute_metric_distance(q, g, &m),
        }
    }

    #[test]
    fn fast_path_matches_dense_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for trial in 0..20 {
            let n = 8 + trial;
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g: Vec<f64> = q.iter().map(|x| x + rng.random_range(-0.05..0.05)).collect();
            for form in [QuadraticForm::Absolute, QuadraticForm::Signed] {
                for sigma in [SigmaChoice::Median, SigmaChoice::Fixed(0.7)] {
                    let p = SsoParams {
                        k: 4.0,
                        sigma,
                        t: 1,
                        form,
                    };
                    let (dense, fast) = match (dense_frame_distance(&q, &g, &p), frame_distance(&q, &g, &p)) {
                        (Ok(d), Ok(f)) => (d, f),
                        // Indefinite signed case: both routes must refuse.
                        (Err(_), Err(_)) => continue,
                        (d, f) => panic!("routes disagree: dense {d:?}, fast {f:?}"),
                    };
                    assert!(
                        (fast - dense).abs() <= 1e-9 * (1.0 + dense.abs()),
                        "trial {trial}: {fast} vs {dense}"
                    );
                }
            }
        }
    }

    #[test]
    fn exp_helper_matches_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100_000 {
            let x: f64 = -rng.random_range(0.0..708.0f64.sqrt()).powi(2);
            let (a, b) = (exp_nonpositive(x), x.exp());
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b, "{x}: {a} vs {b}");
        }
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert_eq!(exp_nonpositive(-1e6), 0.0);
    }

    fn dense_median(q: &[f64], g: &[f64]) -> f64 {
        let d = coordinate_distance_matrix(q, g).unwrap();
        resolve_sigma(d.as_slice(), SigmaChoice::Median)
    }

    #[test]
    fn pairwise_median_edge_cases() {
        for (q, g) in [
            (vec![1.0], vec![1.0]),
            (vec![0.0, 0.0], vec![0.0, 0.0]),
            (vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 3.0]),
            (vec![0.5, -0.5], vec![0.5, -0.5]),
            (vec![0.1, 0.2, 0.3], vec![0.3, 0.2, 0.1]),
        ] {
            assert_eq!(pairwise_median_sigma(&q, &g), dense_median(&q, &g), "{q:?} {g:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn pairwise_median_is_exact(
            pairs in proptest::collection::vec((-3i32..3, -3.0f64..3.0), 1..40),
            quantize in proptest::bool::ANY,
        ) {
            let (q, g): (Vec<f64>, Vec<f64>) = pairs
                .iter()
                .map(|&(a, b)| if quantize { (f64::from(a) * 0.1, f64::from(a.signum()) * 0.1) } else { (b, b * 0.9 + 0.01) })
                .unzip();
            proptest::prop_assert_eq!(pairwise_median_sigma(&q, &g), dense_median(&q, &g));
        }
    }

    #[test]
    fn pair_matches_separate_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for n in [1, 3, 8, 13, 40] {
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for form in [QuadraticForm::Absolute, QuadraticForm::Signed] {
                let p = SsoParams { form, ..SsoParams::default() };
                match frame_distance_pair(&q, &g, &p) {
                    Ok((f, b)) => {
                        assert_eq!(f, frame_distance(&q, &g, &p).unwrap());
                        assert_eq!(b, frame_distance(&g, &q, &p).unwrap());
                    }
                    Err(_) => assert!(frame_distance(&q, &g, &p).is_err() || frame_distance(&g, &q, &p).is_err()),
                }
            }
        }
        let a: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..2).map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let p = SsoParams::default();
        let (ab, ba) = video_distance_pair(&a, &b, &p).unwrap();
        assert_eq!(ab, video_distance(&a, &b, &p).unwrap());
        assert_eq!(ba, video_distance(&b, &a, &p).unwrap());
    }

    #[test]
    fn frame_distance_identity_and_determinism() {
        let q = [0.1, -0.7, 0.3, 0.9];
        let p = SsoParams::default();
        assert_eq!(frame_distance(&q, &q, &p).unwrap(), 0.0);
        let g = [0.2, -0.5, 0.1, 1.0];
        assert_eq!(frame_distance(&q, &g, &p).unwrap(), frame_distance(&q, &g, &p).unwrap());
        assert!(frame_distance(&q, &g, &p).unwrap() >= 0.0);
    }

    #[test]
    fn video_distance_examples() {
        let p = SsoParams::default();
        let a = vec![vec![0.1, 0.5, -0.2], vec![0.9, -0.1, 0.4]];
        assert_eq!(video_distance(&a, &a, &p).unwrap(), 0.0);
        let b = vec![vec![0.3, 0.4, 0.0]];
        let single = video_distance(&a[..1], &b, &p).unwrap();
        assert_eq!(single, frame_distance(&a[0], &b[0], &p).unwrap());

        let table = [[1.0, 4.0], [3.0, 2.0]];
        let v = aggregate_best_match(2, 2, |i, j| Ok(table[i][j])).unwrap();
        assert_eq!(v, 1.5);

        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(video_distance(&empty, &a, &p), Err(NdvrError::EmptySignature(_))));
        assert!(matches!(video_distance(&a, &empty, &p), Err(NdvrError::EmptySignature(_))));
    }

    #[test]
    fn sigma_parsing() {
        assert_eq!("median".parse::<SigmaChoice>().unwrap(), SigmaChoice::Median);
        assert_eq!("0.5".parse::<SigmaChoice>().unwrap(), SigmaChoice::Fixed(0.5));
        assert!("-1".parse::<SigmaChoice>().is_err());
        assert!("wide".parse::<SigmaChoice>().is_err());
        assert_eq!(serde_json::to_string(&SigmaChoice::Median).unwrap(), "\"median\"");
        assert_eq!(serde_json::from_str::<SigmaChoice>("0.25").unwrap(), SigmaChoice::Fixed(0.25));
        assert!(serde_json::from_str::<SigmaChoice>("0").is_err());
    }
}
