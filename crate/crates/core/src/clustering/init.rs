use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sq_dist, PointSet};
use crate::error::{Error, Result};

/// Weighted k-means++ seeding (D² sampling).
///
/// The first centroid is drawn with probability proportional to the point
/// weights, every further one proportional to `weight · D²`, where `D` is
/// the distance to the nearest centroid chosen so far. Points already
/// covered have zero probability, so the `k` centroids are distinct.
pub fn kmeans_pp_init(ps: &PointSet, k: usize, seed: u64) -> Result<Vec<f64>> {
    if ps.is_empty() {
        return Err(Error::InvalidArgument("empty point set".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let distinct = ps.distinct_weighted();
    if k > distinct {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {distinct} distinct weighted points"
        )));
    }

    let dim = ps.dim();
    let weights = ps.weights();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(k * dim);

    let first = sample(&mut rng, weights).expect("positive total weight");
    centroids.extend_from_slice(ps.point(first));

    let mut d2: Vec<f64> = (0..ps.len())
        .map(|i| sq_dist(ps.point(i), ps.point(first)))
        .collect();
    let mut score: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();

    for _ in 1..k {
        let next = sample(&mut rng, &score).ok_or_else(|| {
            Error::InvalidArgument("no uncovered weighted point left to seed from".into())
        })?;
        let c = ps.point(next).to_vec();
        for i in 0..ps.len() {
            let d = sq_dist(ps.point(i), &c);
            if d < d2[i] {
                d2[i] = d;
                score[i] = d * weights[i];
            }
        }
        // guard against rounding leaving a sliver of mass on the chosen point
        score[next] = 0.0;
        d2[next] = 0.0;
        centroids.extend_from_slice(&c);
    }
    Ok(centroids)
}

/// Index drawn with probability proportional to `mass`; `None` if all zero.
fn sample(rng: &mut ChaCha8Rng, mass: &[f64]) -> Option<usize> {
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &m) in mass.iter().enumerate() {
        if m <= 0.0 {
            continue;
        }
        acc += m;
        last = Some(i);
        if acc > target {
            return Some(i);
        }
    }
    last
}
