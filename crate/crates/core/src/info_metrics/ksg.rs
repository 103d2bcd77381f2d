//! k-nearest-neighbour mutual information between actual and predicted
//! haptic feature vectors.
//!
//! The core estimator works on paired point sets of any common dimension.
//! Distances inside either marginal are Chebyshev norms; the joint distance
//! is the larger of the two marginal distances. For point `i` the `k` nearest
//! joint neighbours fix per-marginal radii (the largest marginal distance
//! among them), and `n_actual`, `n_predicted` count the other points inside
//! those radii, boundary included. The estimate is
//!
//! `psi(N) - mean(psi(n_actual) + psi(n_predicted)) + psi(k) - 1/k`.
//!
//! For haptic samples the estimate is taken per feature axis and summed over
//! the nine axes.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::digamma::psi;
use super::MetricsError;
use crate::trace_io::{Features, FEATURE_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KsgConfig {
    pub k: usize,
}

impl Default for KsgConfig {
    fn default() -> Self {
        Self { k: 11 }
    }
}

/// Feature groups of a haptic sample, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureBlock {
    Position,
    Velocity,
    Force,
}

impl FeatureBlock {
    fn offset(self) -> usize {
        match self {
            FeatureBlock::Position => 0,
            FeatureBlock::Velocity => 3,
            FeatureBlock::Force => 6,
        }
    }
}

fn block_of(f: &Features, b: FeatureBlock) -> [f64; 3] {
    let o = b.offset();
    [f[o], f[o + 1], f[o + 2]]
}

/// `N` pairs of actual and predicted feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSignalSet {
    actual: Vec<Features>,
    predicted: Vec<Features>,
}

impl PairedSignalSet {
    pub fn new(actual: Vec<Features>, predicted: Vec<Features>) -> Result<Self, MetricsError> {
        if actual.len() != predicted.len() {
            return Err(MetricsError::LengthMismatch(actual.len(), predicted.len()));
        }
        if !actual
            .iter()
            .chain(&predicted)
            .flatten()
            .all(|x| x.is_finite())
        {
            return Err(MetricsError::NonFinite);
        }
        Ok(Self { actual, predicted })
    }

    /// Builds the set from per-block `(actual, predicted)` 3-vector pairs.
    pub fn from_blocks(
        force: &[([f64; 3], [f64; 3])],
        velocity: &[([f64; 3], [f64; 3])],
        position: &[([f64; 3], [f64; 3])],
    ) -> Result<Self, MetricsError> {
        let n = force.len();
        if velocity.len() != n || position.len() != n {
            return Err(MetricsError::LengthMismatch(
                n,
                velocity.len().max(position.len()),
            ));
        }
        let join = |p: &[f64; 3], v: &[f64; 3], f: &[f64; 3]| -> Features {
            [p[0], p[1], p[2], v[0], v[1], v[2], f[0], f[1], f[2]]
        };
        let actual = (0..n)
            .map(|i| join(&position[i].0, &velocity[i].0, &force[i].0))
            .collect();
        let predicted = (0..n)
            .map(|i| join(&position[i].1, &velocity[i].1, &force[i].1))
            .collect();
        Self::new(actual, predicted)
    }

    pub fn len(&self) -> usize {
        self.actual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actual.is_empty()
    }

    pub fn actual(&self) -> &[Features] {
        &self.actual
    }

    pub fn predicted(&self) -> &[Features] {
        &self.predicted
    }

    pub fn block(&self, b: FeatureBlock) -> Vec<([f64; 3], [f64; 3])> {
        self.actual
            .iter()
            .zip(&self.predicted)
            .map(|(a, p)| (block_of(a, b), block_of(p, b)))
            .collect()
    }

    /// Actual and predicted values of one feature axis.
    pub fn axis(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        (
            self.actual.iter().map(|f| f[k]).collect(),
            self.predicted.iter().map(|f| f[k]).collect(),
        )
    }
}

/// Maximum absolute coordinate difference.
pub fn chebyshev_distance(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(cheb(a, b))
}

#[inline]
fn cheb(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Per-point neighbourhood statistics of the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborCounts {
    /// Largest actual-marginal distance among the k joint neighbours.
    pub radius_actual: f64,
    /// Largest predicted-marginal distance among the k joint neighbours.
    pub radius_predicted: f64,
    pub n_actual: usize,
    pub n_predicted: usize,
}

type Dist = (f64, usize, f64, f64);

fn row(v: &[f64], dim: usize, i: usize) -> &[f64] {
    &v[i * dim..(i + 1) * dim]
}

fn counts_from_radii(
    i: usize,
    closest: f64,
    radius_actual: f64,
    radius_predicted: f64,
    n_actual: usize,
    n_predicted: usize,
) -> Result<NeighborCounts, MetricsError> {
    if closest == 0.0 || radius_actual == 0.0 || radius_predicted == 0.0 {
        return Err(MetricsError::DegenerateData { point: i });
    }
    Ok(NeighborCounts {
        radius_actual,
        radius_predicted,
        n_actual,
        n_predicted,
    })
}

/// Reference scan over all other points: one pass keeps the `k` nearest
/// by `(distance, index)`, a second counts the marginal neighbours.
fn brute_point(
    x: &[f64],
    y: &[f64],
    dim: usize,
    i: usize,
    k: usize,
) -> Result<NeighborCounts, MetricsError> {
    if dim == 1 {
        return brute_scalar(x, y, i, k);
    }
    let n = x.len() / dim;
    let (xi, yi) = (row(x, dim, i), row(y, dim, i));
    let mut best: Vec<Dist> = Vec::with_capacity(k + 1);
    for j in (0..n).filter(|&j| j != i) {
        let dx = cheb(xi, row(x, dim, j));
        let dy = cheb(yi, row(y, dim, j));
        let d = dx.max(dy);
        // Indices arrive in increasing order, so an equal distance never
        // displaces a kept neighbour.
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let at = best.partition_point(|b| b.0 <= d);
        best.insert(at, (d, j, dx, dy));
        best.truncate(k);
    }
    let closest = best.first().map_or(f64::INFINITY, |d| d.0);
    let ra = best.iter().fold(0.0f64, |m, d| m.max(d.2));
    let rp = best.iter().fold(0.0f64, |m, d| m.max(d.3));
    let (mut na, mut np) = (0, 0);
    for j in (0..n).filter(|&j| j != i) {
        na += usize::from(cheb(xi, row(x, dim, j)) <= ra);
        np += usize::from(cheb(yi, row(y, dim, j)) <= rp);
    }
    counts_from_radii(i, closest, ra, rp, na, np)
}

/// [`brute_point`] for one coordinate per block.
fn brute_scalar(x: &[f64], y: &[f64], i: usize, k: usize) -> Result<NeighborCounts, MetricsError> {
    let (xi, yi) = (x[i], y[i]);
    let mut best: Vec<Dist> = Vec::with_capacity(k + 1);
    let mut worst = f64::INFINITY;
    for (j, (&xj, &yj)) in x.iter().zip(y).enumerate() {
        let dx = (xi - xj).abs();
        let dy = (yi - yj).abs();
        let d = dx.max(dy);
        if d >= worst || j == i {
            continue;
        }
        let at = best.partition_point(|b| b.0 <= d);
        best.insert(at, (d, j, dx, dy));
        best.truncate(k);
        if best.len() == k {
            worst = best[k - 1].0;
        }
    }
    let closest = best.first().map_or(f64::INFINITY, |d| d.0);
    let ra = best.iter().fold(0.0f64, |m, d| m.max(d.2));
    let rp = best.iter().fold(0.0f64, |m, d| m.max(d.3));
    // The point itself is inside both radii.
    let na = x.iter().filter(|&&xj| (xi - xj).abs() <= ra).count() - 1;
    let np = y.iter().filter(|&&yj| (yi - yj).abs() <= rp).count() - 1;
    counts_from_radii(i, closest, ra, rp, na, np)
}

/// Points sorted by their first actual coordinate, plus sorted copies of
/// each marginal for one-dimensional range counts.
struct SortedIndex {
    order: Vec<usize>,
    rank: Vec<usize>,
    sorted_actual: Vec<f64>,
    sorted_predicted: Vec<f64>,
}

impl SortedIndex {
    fn new(x: &[f64], y: &[f64], dim: usize) -> Self {
        let n = x.len() / dim;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| x[a * dim].total_cmp(&x[b * dim]).then(a.cmp(&b)));
        let mut rank = vec![0; n];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        let sorted = |v: &[f64]| {
            let mut s = if dim == 1 { v.to_vec() } else { Vec::new() };
            s.sort_by(f64::total_cmp);
            s
        };
        Self {
            order,
            rank,
            sorted_actual: sorted(x),
            sorted_predicted: sorted(y),
        }
    }
}

/// Number of entries `v` of a sorted slice with `|v - c| <= r`, minus one
/// for the centre itself. Both predicates are monotone along the slice
/// because rounded subtraction is monotone.
fn range_count(sorted: &[f64], c: f64, r: f64) -> usize {
    let lo = sorted.partition_point(|&v| c - v > r);
    let hi = sorted.partition_point(|&v| v - c <= r);
    hi - lo - 1
}

/// Same result as [`brute_point`]: candidates are visited outward along
/// the first actual coordinate, whose gap bounds the joint distance from
/// below, until no closer neighbour can remain.
fn sweep_point(
    x: &[f64],
    y: &[f64],
    dim: usize,
    idx: &SortedIndex,
    i: usize,
    k: usize,
) -> Result<NeighborCounts, MetricsError> {
    let n = x.len() / dim;
    let (xi, yi) = (row(x, dim, i), row(y, dim, i));
    let r = idx.rank[i];
    let gap = |j: usize| (x[j * dim] - xi[0]).abs();
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    let (mut left, mut right) = (r, r + 1);
    loop {
        let l = (left > 0).then(|| idx.order[left - 1]);
        let u = (right < n).then(|| idx.order[right]);
        let j = match (l, u) {
            (Some(a), Some(b)) => {
                if gap(a) <= gap(b) {
                    left -= 1;
                    a
                } else {
                    right += 1;
                    b
                }
            }
            (Some(a), None) => {
                left -= 1;
                a
            }
            (None, Some(b)) => {
                right += 1;
                b
            }
            (None, None) => break,
        };
        if best.len() == k && gap(j) > best[k - 1].0 {
            break;
        }
        let d = cheb(xi, row(x, dim, j)).max(cheb(yi, row(y, dim, j)));
        let key = (d, j);
        if best.len() < k
            || key
                .0
                .total_cmp(&best[k - 1].0)
                .then(key.1.cmp(&best[k - 1].1))
                .is_lt()
        {
            let pos = best.partition_point(|b| b.0.total_cmp(&d).then(b.1.cmp(&j)).is_lt());
            best.insert(pos, key);
            best.truncate(k);
        }
    }
    let closest = best[0].0;
    let ra = best
        .iter()
        .fold(0.0f64, |m, b| m.max(cheb(xi, row(x, dim, b.1))));
    let rp = best
        .iter()
        .fold(0.0f64, |m, b| m.max(cheb(yi, row(y, dim, b.1))));
    let (na, np) = if dim == 1 {
        (
            range_count(&idx.sorted_actual, xi[0], ra),
            range_count(&idx.sorted_predicted, yi[0], rp),
        )
    } else {
        (0..n).filter(|&j| j != i).fold((0, 0), |(a, p), j| {
            (
                a + usize::from(cheb(xi, row(x, dim, j)) <= ra),
                p + usize::from(cheb(yi, row(y, dim, j)) <= rp),
            )
        })
    };
    counts_from_radii(i, closest, ra, rp, na, np)
}

fn check_points(x: &[f64], y: &[f64], dim: usize, cfg: &KsgConfig) -> Result<usize, MetricsError> {
    if cfg.k == 0 {
        return Err(MetricsError::InvalidConfig("k must be at least 1".into()));
    }
    if dim == 0 || !x.len().is_multiple_of(dim) || !y.len().is_multiple_of(dim) {
        return Err(MetricsError::DimensionMismatch(x.len(), dim));
    }
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len() / dim, y.len() / dim));
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let n = x.len() / dim;
    if n <= cfg.k {
        return Err(MetricsError::TooFewSamples { n, k: cfg.k });
    }
    Ok(n)
}

fn collect_ordered(
    results: Vec<Result<NeighborCounts, MetricsError>>,
) -> Result<Vec<NeighborCounts>, MetricsError> {
    // First failing point in index order, independent of scheduling.
    results.into_iter().collect()
}

/// Neighbour statistics for paired point sets stored row-major with `dim`
/// coordinates per point, in index order.
pub fn pair_neighbor_counts(
    actual: &[f64],
    predicted: &[f64],
    dim: usize,
    cfg: &KsgConfig,
) -> Result<Vec<NeighborCounts>, MetricsError> {
    let n = check_points(actual, predicted, dim, cfg)?;
    let idx = SortedIndex::new(actual, predicted, dim);
    collect_ordered(
        (0..n)
            .into_par_iter()
            .map(|i| sweep_point(actual, predicted, dim, &idx, i, cfg.k))
            .collect(),
    )
}

/// Exhaustive O(N^2) version of [`pair_neighbor_counts`]; the two always
/// agree exactly.
pub fn pair_neighbor_counts_brute(
    actual: &[f64],
    predicted: &[f64],
    dim: usize,
    cfg: &KsgConfig,
) -> Result<Vec<NeighborCounts>, MetricsError> {
    let n = check_points(actual, predicted, dim, cfg)?;
    collect_ordered(
        (0..n)
            .into_par_iter()
            .map(|i| brute_point(actual, predicted, dim, i, cfg.k))
            .collect(),
    )
}

/// Mutual information in nats between two paired point sets stored
/// row-major with `dim` coordinates per point.
pub fn ksg_pair_mi(
    actual: &[f64],
    predicted: &[f64],
    dim: usize,
    cfg: &KsgConfig,
) -> Result<f64, MetricsError> {
    let counts = pair_neighbor_counts(actual, predicted, dim, cfg)?;
    let n = counts.len() as f64;
    let k = cfg.k as f64;
    let mean_marginal = counts
        .iter()
        .map(|c| psi(c.n_actual as f64) + psi(c.n_predicted as f64))
        .sum::<f64>()
        / n;
    Ok(psi(n) - mean_marginal + psi(k) - 1.0 / k)
}

/// Neighbour statistics of one feature axis of a haptic signal set.
pub fn neighbor_counts(
    data: &PairedSignalSet,
    axis: usize,
    cfg: &KsgConfig,
) -> Result<Vec<NeighborCounts>, MetricsError> {
    if axis >= FEATURE_COUNT {
        return Err(MetricsError::DimensionMismatch(axis, FEATURE_COUNT));
    }
    let (a, p) = data.axis(axis);
    pair_neighbor_counts(&a, &p, 1, cfg)
}

/// Per-axis mutual information estimates in nats.
pub fn ksg_axis_mutual_information(
    data: &PairedSignalSet,
    cfg: &KsgConfig,
) -> Result<Features, MetricsError> {
    let mut out = [0.0; FEATURE_COUNT];
    for (k, slot) in out.iter_mut().enumerate() {
        let (a, p) = data.axis(k);
        *slot = ksg_pair_mi(&a, &p, 1, cfg)?;
    }
    Ok(out)
}

/// Mutual information estimate in nats, summed over the nine feature axes.
pub fn ksg_mutual_information(
    data: &PairedSignalSet,
    cfg: &KsgConfig,
) -> Result<f64, MetricsError> {
    Ok(ksg_axis_mutual_information(data, cfg)?.iter().sum())
}

/// Writes per-point diagnostics as CSV
/// (`axis,point,radius_actual,radius_predicted,n_actual,n_predicted`).
pub fn write_neighbor_diagnostics<W: Write>(
    data: &PairedSignalSet,
    cfg: &KsgConfig,
    out: W,
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "axis",
        "point",
        "radius_actual",
        "radius_predicted",
        "n_actual",
        "n_predicted",
    ])?;
    for axis in 0..FEATURE_COUNT {
        for (i, c) in neighbor_counts(data, axis, cfg)?.iter().enumerate() {
            w.write_record([
                axis.to_string(),
                i.to_string(),
                c.radius_actual.to_string(),
                c.radius_predicted.to_string(),
                c.n_actual.to_string(),
                c.n_predicted.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
