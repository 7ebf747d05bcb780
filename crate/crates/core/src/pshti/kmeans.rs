//! Lloyd's k-means with seeded k-means++ initialization.
//!
//! Deterministic by construction: seeded init, fixed iteration order,
//! nearest-centroid ties resolved toward the lowest index, and empty
//! clusters repaired by donating the globally farthest point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PshtiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansResult {
    /// Cluster index per input point, in input order.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to assigned centroids at convergence.
    pub inertia: f64,
    /// Inertia after each assignment step; non-increasing.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared distance; ties pick the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

fn kmeanspp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..points.len());
    centroids.push(points[first].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let chosen = if total <= 0.0 {
            // All remaining mass is on already-chosen (duplicate) points;
            // fall back to the first point not yet used as a centroid.
            (0..points.len())
                .find(|&i| !centroids.contains(&points[i]))
                .unwrap_or(0)
        } else {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.push(points[chosen].clone());
        let newest = centroids.last().expect("just pushed");
        for (d, p) in d2.iter_mut().zip(points) {
            let nd = squared_distance(p, newest);
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

/// Clusters `points` into `k` groups. Needs at least as many points as
/// clusters; duplicates are fine. Runs until assignments stop changing or
/// `max_iterations` passes.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iterations: usize,
) -> Result<KmeansResult, PshtiError> {
    if k == 0 {
        return Err(PshtiError::InvalidConfig("k must be >= 1".into()));
    }
    if max_iterations == 0 {
        return Err(PshtiError::InvalidConfig(
            "max_iterations must be >= 1".into(),
        ));
    }
    if points.len() < k {
        return Err(PshtiError::TooFewPoints {
            points: points.len(),
            k,
        });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(PshtiError::InvalidConfig(
            "points must share a dimension".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_init(points, k, &mut rng);
    let mut assignments = vec![0usize; points.len()];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iterations {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            if assignments[i] != c {
                changed = true;
                assignments[i] = c;
            }
            inertia += d;
        }

        // Repair empty clusters before the mean update: the globally
        // farthest point (from its assigned centroid) becomes the seed of
        // the empty cluster. Lowest point index wins distance ties.
        loop {
            let mut sizes = vec![0usize; k];
            for &a in &assignments {
                sizes[a] += 1;
            }
            let Some(empty) = sizes.iter().position(|&s| s == 0) else {
                break;
            };
            let mut donor = None;
            let mut worst = -1.0;
            for (i, p) in points.iter().enumerate() {
                if sizes[assignments[i]] <= 1 {
                    continue; // do not empty another cluster
                }
                let d = squared_distance(p, &centroids[assignments[i]]);
                if d > worst {
                    worst = d;
                    donor = Some(i);
                }
            }
            let donor = donor.expect("n >= k guarantees a donor");
            assignments[donor] = empty;
            centroids[empty] = points[donor].clone();
            changed = true;
        }

        // Recompute inertia against the (possibly repaired) assignment.
        let inertia = if inertia_trace.is_empty() || changed {
            let mut v = 0.0;
            for (i, p) in points.iter().enumerate() {
                v += squared_distance(p, &centroids[assignments[i]]);
            }
            v
        } else {
            inertia
        };
        inertia_trace.push(inertia);

        if !changed && iterations > 1 {
            break;
        }

        // Mean update. Every cluster is nonempty after repair.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignments[i]] += 1;
            for (s, v) in sums[assignments[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            for s in sums[c].iter_mut() {
                *s /= counts[c] as f64;
            }
        }
        centroids = sums;
    }

    // Final inertia against final centroids and assignments.
    let inertia = points
        .iter()
        .enumerate()
        .map(|(i, p)| squared_distance(p, &centroids[assignments[i]]))
        .sum();

    Ok(KmeansResult {
        assignments,
        centroids,
        inertia,
        inertia_trace,
        iterations,
    })
}
