use rayon::prelude::*;

use super::{
    inertia, nearest, run_with_workers, update_centroids, validate_init, Clustering, KMeansOptions,
    PointSet,
};
use crate::error::Result;

/// Plain weighted Lloyd iteration: every assignment step computes all
/// `n · k` distances.
pub fn lloyd(ps: &PointSet, init: &[f64], opts: &KMeansOptions) -> Result<Clustering> {
    let k = validate_init(ps, init, opts)?;
    let dim = ps.dim();
    run_with_workers(opts.workers, || {
        let mut centroids = init.to_vec();
        let mut assignment = vec![0u32; ps.len()];
        let mut history = Vec::new();
        let mut evals = 0u64;
        let mut iterations = 0;

        for _ in 0..opts.max_iter {
            assign_all(ps, &centroids, &mut assignment);
            evals += (ps.len() * k) as u64;
            history.push(inertia(ps, &centroids, &assignment));

            let update = update_centroids(ps, &assignment, &centroids);
            iterations += 1;
            let shift = update.max_drift();
            centroids = update.centroids;
            if shift < opts.tol {
                break;
            }
        }

        assign_all(ps, &centroids, &mut assignment);
        evals += (ps.len() * k) as u64;
        let final_inertia = inertia(ps, &centroids, &assignment);
        history.push(final_inertia);

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

fn assign_all(ps: &PointSet, centroids: &[f64], assignment: &mut [u32]) {
    let dim = ps.dim();
    assignment
        .par_iter_mut()
        .zip(ps.coords().par_chunks_exact(dim))
        .for_each(|(a, x)| *a = nearest(x, centroids, dim).0);
}
