//! Weighted k-means: k-means++ seeding, a plain Lloyd iteration and a
//! Yinyang-accelerated iteration that reproduces Lloyd exactly.
//!
//! Both iterations share the centroid update (sequential, point order, f64
//! accumulation) and the nearest-centroid rule (smallest squared distance,
//! lowest centroid index on ties), so for the same initial centroids they
//! produce identical assignments, centroids and inertia. Only the assignment
//! step is parallel; each point's decision is independent of the others, so
//! the worker count never changes the result.

mod init;
mod lloyd;
mod yinyang;

use std::collections::HashSet;

use rayon::ThreadPoolBuilder;

use crate::error::{Error, Result};

pub use init::kmeans_pp_init;
pub use lloyd::lloyd;
pub use yinyang::yinyang;

/// A set of weighted points of equal dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl PointSet {
    /// Unit-weight points from a flat row-major buffer.
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        let n = coords.len().checked_div(dim).unwrap_or(0);
        Self::with_weights(dim, coords, vec![1.0; n])
    }

    pub fn with_weights(dim: usize, coords: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "point dimension must be >= 1".into(),
            ));
        }
        if !coords.len().is_multiple_of(dim) || coords.len() / dim != weights.len() {
            return Err(Error::Shape(format!(
                "{} coordinates do not form {} points of dimension {dim}",
                coords.len(),
                weights.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite point coordinate".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "point weights must be finite and >= 0".into(),
            ));
        }
        if !weights.is_empty() && !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::InvalidArgument(
                "at least one point weight must be positive".into(),
            ));
        }
        Ok(PointSet {
            dim,
            coords,
            weights,
        })
    }

    pub fn from_f32(dim: usize, coords: &[f32]) -> Result<Self> {
        Self::new(dim, coords.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of distinct points carrying positive weight.
    pub fn distinct_weighted(&self) -> usize {
        let mut seen = HashSet::new();
        for (i, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                seen.insert(point_key(self.point(i)));
            }
        }
        seen.len()
    }
}

/// Bit-level key of a point with `-0.0` folded onto `0.0`.
pub(crate) fn point_key(p: &[f64]) -> Vec<u64> {
    p.iter().map(|&v| (v + 0.0).to_bits()).collect()
}

/// Iteration controls shared by [`lloyd`] and [`yinyang`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Stop once no centroid moves by this much (Euclidean) in an update.
    pub tol: f64,
    /// Threads used for the assignment step; results do not depend on it.
    pub workers: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            max_iter: 100,
            tol: 1e-6,
            workers: 1,
        }
    }
}

/// Which iteration to run after seeding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Algorithm {
    Lloyd,
    #[default]
    Yinyang,
}

/// Result of a k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub dim: usize,
    /// `k` centroids, row-major.
    pub centroids: Vec<f64>,
    pub assignment: Vec<u32>,
    /// Weighted sum of squared distances to the assigned centroids.
    pub inertia: f64,
    /// Inertia after every assignment step, final one last.
    pub history: Vec<f64>,
    /// Centroid updates performed.
    pub iterations: usize,
    /// Point-to-centroid distance computations in assignment steps.
    pub distance_evals: u64,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Total weight assigned to each centroid.
    pub fn cluster_weights(&self, ps: &PointSet) -> Vec<f64> {
        let mut out = vec![0.0; self.k()];
        for (&a, &w) in self.assignment.iter().zip(ps.weights()) {
            out[a as usize] += w;
        }
        out
    }
}

/// Seeds with k-means++ and runs the requested iteration.
pub fn kmeans(
    ps: &PointSet,
    k: usize,
    seed: u64,
    opts: &KMeansOptions,
    algorithm: Algorithm,
) -> Result<Clustering> {
    let init = kmeans_pp_init(ps, k, seed)?;
    match algorithm {
        Algorithm::Lloyd => lloyd(ps, &init, opts),
        Algorithm::Yinyang => yinyang(ps, &init, opts),
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared distance, lowest index on ties.
#[inline]
pub(crate) fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j as u32, d);
        }
    }
    best
}

pub(crate) fn inertia(ps: &PointSet, centroids: &[f64], assignment: &[u32]) -> f64 {
    let dim = ps.dim();
    let mut total = 0.0;
    for (i, &a) in assignment.iter().enumerate() {
        let a = a as usize;
        total += ps.weights()[i] * sq_dist(ps.point(i), &centroids[a * dim..(a + 1) * dim]);
    }
    total
}

pub(crate) struct Update {
    pub centroids: Vec<f64>,
    /// Euclidean displacement of every centroid.
    pub drift: Vec<f64>,
}

impl Update {
    pub fn max_drift(&self) -> f64 {
        self.drift.iter().copied().fold(0.0, f64::max)
    }
}

/// Weighted-mean update. Centroids left without weight are moved onto the
/// points with the largest weighted squared distance to their own centroid.
pub(crate) fn update_centroids(ps: &PointSet, assignment: &[u32], old: &[f64]) -> Update {
    let dim = ps.dim();
    let k = old.len() / dim;
    let mut sums = vec![0.0f64; k * dim];
    let mut mass = vec![0.0f64; k];
    for (i, &a) in assignment.iter().enumerate() {
        let w = ps.weights()[i];
        if w == 0.0 {
            continue;
        }
        let a = a as usize;
        mass[a] += w;
        for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(ps.point(i)) {
            *s += w * x;
        }
    }

    let mut centroids = old.to_vec();
    let mut empty = Vec::new();
    for j in 0..k {
        if mass[j] > 0.0 {
            for d in 0..dim {
                centroids[j * dim + d] = sums[j * dim + d] / mass[j];
            }
        } else {
            empty.push(j);
        }
    }

    if !empty.is_empty() {
        let mut cost: Vec<f64> = assignment
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let a = a as usize;
                ps.weights()[i] * sq_dist(ps.point(i), &centroids[a * dim..(a + 1) * dim])
            })
            .collect();
        for j in empty {
            let mut pick: Option<usize> = None;
            for (i, &c) in cost.iter().enumerate() {
                if c > 0.0 && pick.is_none_or(|p| c > cost[p]) {
                    pick = Some(i);
                }
            }
            match pick {
                Some(i) => {
                    centroids[j * dim..(j + 1) * dim].copy_from_slice(ps.point(i));
                    cost[i] = 0.0;
                }
                None => log::debug!("centroid {j} left empty: every point sits on a centroid"),
            }
        }
    }

    let drift = old
        .chunks_exact(dim)
        .zip(centroids.chunks_exact(dim))
        .map(|(a, b)| sq_dist(a, b).sqrt())
        .collect();
    Update { centroids, drift }
}

pub(crate) fn validate_init(ps: &PointSet, init: &[f64], opts: &KMeansOptions) -> Result<usize> {
    if ps.is_empty() {
        return Err(Error::InvalidArgument("empty point set".into()));
    }
    if init.is_empty() || !init.len().is_multiple_of(ps.dim()) {
        return Err(Error::InvalidArgument(format!(
            "initial centroids ({} values) do not form a non-empty set of {}-D points",
            init.len(),
            ps.dim()
        )));
    }
    if opts.max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
    }
    let k = init.len() / ps.dim();
    if k > u32::MAX as usize {
        return Err(Error::InvalidArgument(format!("k = {k} too large")));
    }
    Ok(k)
}

/// Runs `f` on a pool with the configured number of threads.
pub(crate) fn run_with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    match ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("could not build a {workers}-thread pool ({e}); using the global pool");
            f()
        }
    }
}
