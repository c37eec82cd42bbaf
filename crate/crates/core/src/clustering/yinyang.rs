//! Yinyang k-means.
//!
//! Centroids are partitioned once into `max(1, k/10)` groups by clustering the
//! initial centroids. Every point keeps an upper bound on the distance to its
//! centroid and, per group, a lower bound on the distance to every other
//! centroid of that group. After an update the upper bound grows by the
//! assigned centroid's drift and each group bound shrinks by the group's
//! largest drift. A group whose lower bound exceeds the current best
//! distance cannot hold the nearest centroid and is skipped.
//!
//! Skipping happens only on a strict separation with a small relative slack,
//! so a skipped centroid can never tie with the winner; together with the
//! shared lowest-index tie rule this makes the assignment identical to
//! [`super::lloyd`].

use rayon::prelude::*;

use super::{
    inertia, kmeans_pp_init, lloyd, nearest, run_with_workers, sq_dist, update_centroids,
    validate_init, Clustering, KMeansOptions, PointSet,
};
use crate::error::Result;

/// (squared distance, centroid index)
type Candidate = (f64, usize);

const GROUPING_SEED: u64 = 0x59_49_4e_59_41_4e_47;
const GROUPING_ITERS: usize = 5;
const REL_SLACK: f64 = 1e-9;

/// Yinyang-accelerated weighted k-means; same contract and output as
/// [`lloyd`].
pub fn yinyang(ps: &PointSet, init: &[f64], opts: &KMeansOptions) -> Result<Clustering> {
    let k = validate_init(ps, init, opts)?;
    let dim = ps.dim();
    let groups = group_centroids(init, dim, k)?;
    let t = groups.members.len();
    let abs_slack = 1e-12
        * ps.coords()
            .iter()
            .chain(init)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
    let slack = Slack { abs: abs_slack };

    run_with_workers(opts.workers, || {
        let mut centroids = init.to_vec();
        let mut assignment = vec![0u32; ps.len()];
        let mut upper = vec![0.0f64; ps.len()];
        let mut lower = vec![0.0f64; ps.len() * t];
        let mut history = Vec::new();
        let mut iterations = 0;

        let mut evals = full_assign(
            ps,
            &centroids,
            &groups,
            &mut assignment,
            &mut upper,
            &mut lower,
        );
        loop {
            history.push(inertia(ps, &centroids, &assignment));
            if iterations == opts.max_iter {
                break;
            }
            let update = update_centroids(ps, &assignment, &centroids);
            iterations += 1;
            let shift = update.max_drift();
            centroids = update.centroids;

            let group_drift: Vec<f64> = groups
                .members
                .iter()
                .map(|m| m.iter().map(|&j| update.drift[j]).fold(0.0, f64::max))
                .collect();
            evals += filtered_assign(
                ps,
                &centroids,
                &groups,
                &update.drift,
                &group_drift,
                slack,
                &mut assignment,
                &mut upper,
                &mut lower,
            );
            if shift < opts.tol {
                history.push(inertia(ps, &centroids, &assignment));
                break;
            }
        }

        let final_inertia = *history.last().expect("at least one assignment");
        Ok(Clustering {
            dim,
            centroids,
            assignment,
            inertia: final_inertia,
            history,
            iterations,
            distance_evals: evals,
        })
    })
}

struct Groups {
    members: Vec<Vec<usize>>,
    of: Vec<usize>,
}

fn group_centroids(init: &[f64], dim: usize, k: usize) -> Result<Groups> {
    let centers = PointSet::new(dim, init.to_vec())?;
    let t = (k / 10).max(1).min(centers.distinct_weighted());
    let labels: Vec<u32> = if t <= 1 {
        vec![0; k]
    } else {
        let seeds = kmeans_pp_init(&centers, t, GROUPING_SEED)?;
        let opts = KMeansOptions {
            max_iter: GROUPING_ITERS,
            tol: 0.0,
            workers: 1,
        };
        lloyd(&centers, &seeds, &opts)?.assignment
    };
    let mut members = vec![Vec::new(); t.max(1)];
    for (j, &g) in labels.iter().enumerate() {
        members[g as usize].push(j);
    }
    members.retain(|m| !m.is_empty());
    let mut of = vec![0; k];
    for (g, m) in members.iter().enumerate() {
        for &j in m {
            of[j] = g;
        }
    }
    Ok(Groups { members, of })
}

#[derive(Clone, Copy)]
struct Slack {
    abs: f64,
}

impl Slack {
    /// True when `lower` is certainly larger than `upper` despite rounding.
    #[inline]
    fn separated(self, lower: f64, upper: f64) -> bool {
        lower > upper + REL_SLACK * lower.max(upper) + self.abs
    }
}

fn full_assign(
    ps: &PointSet,
    centroids: &[f64],
    groups: &Groups,
    assignment: &mut [u32],
    upper: &mut [f64],
    lower: &mut [f64],
) -> u64 {
    let dim = ps.dim();
    let t = groups.members.len();
    let k = centroids.len() / dim;
    assignment
        .par_iter_mut()
        .zip(upper.par_iter_mut())
        .zip(lower.par_chunks_exact_mut(t))
        .zip(ps.coords().par_chunks_exact(dim))
        .for_each(|(((a, ub), lb), x)| {
            let (best, best_sq) = nearest(x, centroids, dim);
            *a = best;
            *ub = best_sq.sqrt();
            lb.fill(f64::INFINITY);
            for (j, c) in centroids.chunks_exact(dim).enumerate() {
                if j != best as usize {
                    let g = groups.of[j];
                    lb[g] = lb[g].min(sq_dist(x, c).sqrt());
                }
            }
        });
    (ps.len() * k) as u64
}

#[allow(clippy::too_many_arguments)]
fn filtered_assign(
    ps: &PointSet,
    centroids: &[f64],
    groups: &Groups,
    drift: &[f64],
    group_drift: &[f64],
    slack: Slack,
    assignment: &mut [u32],
    upper: &mut [f64],
    lower: &mut [f64],
) -> u64 {
    let dim = ps.dim();
    let t = groups.members.len();
    assignment
        .par_iter_mut()
        .zip(upper.par_iter_mut())
        .zip(lower.par_chunks_exact_mut(t))
        .zip(ps.coords().par_chunks_exact(dim))
        .map(|(((a, ub), lb), x)| {
            let old = *a as usize;
            *ub += drift[old];
            for (l, d) in lb.iter_mut().zip(group_drift) {
                *l = (*l - d).max(0.0);
            }
            let global = lb.iter().copied().fold(f64::INFINITY, f64::min);
            if slack.separated(global, *ub) {
                return 0u64;
            }

            let old_c = &centroids[old * dim..(old + 1) * dim];
            let old_sq = sq_dist(x, old_c);
            let mut evals = 1u64;
            *ub = old_sq.sqrt();
            if slack.separated(global, *ub) {
                return evals;
            }

            // (squared distance, index) of the winner so far
            let mut best = (old_sq, old);
            let mut bound = *ub;
            // per scanned group: the two smallest (sq, index) pairs
            let mut scanned: Vec<(usize, Candidate, Candidate)> = Vec::new();
            for (g, members) in groups.members.iter().enumerate() {
                if slack.separated(lb[g], bound) {
                    continue;
                }
                let mut first = (f64::INFINITY, usize::MAX);
                let mut second = (f64::INFINITY, usize::MAX);
                for &j in members {
                    let d = if j == old {
                        old_sq
                    } else {
                        evals += 1;
                        sq_dist(x, &centroids[j * dim..(j + 1) * dim])
                    };
                    let cand = (d, j);
                    if less(cand, first) {
                        second = first;
                        first = cand;
                    } else if less(cand, second) {
                        second = cand;
                    }
                }
                if less(first, best) {
                    best = first;
                    bound = best.0.sqrt();
                }
                scanned.push((g, first, second));
            }

            let winner = best.1;
            for &(g, first, second) in &scanned {
                let other = if first.1 == winner { second } else { first };
                lb[g] = other.0.sqrt();
            }
            let old_group = groups.of[old];
            if winner != old && !scanned.iter().any(|s| s.0 == old_group) {
                lb[old_group] = lb[old_group].min(old_sq.sqrt());
            }
            *a = winner as u32;
            *ub = best.0.sqrt();
            evals
        })
        .sum()
}

/// Lloyd's tie rule on (squared distance, index) pairs.
#[inline]
fn less(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}
