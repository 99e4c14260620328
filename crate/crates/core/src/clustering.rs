//! k-means with k-means++ seeding and Lloyd iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mathcore::{squared_distance, RealMatrix};

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub centers: RealMatrix,
    /// Index of the nearest center for each point (ties to the lowest).
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its assigned center.
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after every assignment step, final assignment included.
    pub inertia_history: Vec<f64>,
}

fn nearest(point: &[f64], centers: &RealMatrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.row_iter().enumerate() {
        let d = squared_distance(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &RealMatrix, centers: &RealMatrix) -> (Vec<usize>, Vec<f64>) {
    points.row_iter().map(|p| nearest(p, centers)).unzip()
}

fn plus_plus_init(points: &RealMatrix, k: usize, rng: &mut ChaCha8Rng) -> RealMatrix {
    let n = points.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = points
        .row_iter()
        .map(|p| squared_distance(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every point coincides with a chosen center
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in points.row_iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

/// Clusters the rows of `points` into `k` groups.
///
/// Iterates until no center moves by more than `tol` (Euclidean) or
/// `max_iters` update steps have run. A center that loses all its points is
/// moved onto the point farthest from its current center.
pub fn kmeans(
    points: &RealMatrix,
    k: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<ClusterResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n < k {
        return Err(Error::invalid(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    let d = points.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        let (assignments, dists) = assign(points, &centers);
        history.push(dists.iter().sum());
        if iterations >= max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.row_iter().zip(&assignments) {
            counts[a] += 1;
            for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next = RealMatrix::zeros(k, d);
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    next.set(c, j, sums[c * d + j] / counts[c] as f64);
                }
            } else {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken.push(far);
                for j in 0..d {
                    next.set(c, j, points.get(far, j));
                }
            }
        }
        let shift = centers
            .row_iter()
            .zip(next.row_iter())
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        if shift < tol {
            break;
        }
    }

    let (assignments, dists) = assign(points, &centers);
    let inertia: f64 = dists.iter().sum();
    if history.last() != Some(&inertia) {
        history.push(inertia);
    }
    Ok(ClusterResult {
        centers,
        assignments,
        inertia,
        iterations_run: iterations,
        inertia_history: history,
    })
}
