//! Codebook construction: seeded k-means over descriptor rows.
//!
//! Seeding is distance-squared probabilistic (farthest-first style): the
//! first center is uniform, later centers are drawn with probability
//! proportional to the squared distance from the nearest chosen center.
//! Lloyd iterations follow; a cluster that empties is reseeded to the point
//! currently farthest from its assigned centroid, which keeps the objective
//! strictly decreasing. Everything is deterministic given the seed.

use crate::linalg::dist2_f32;
use crate::{Error, Result};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// A trained codebook: `k` distinct centroids of dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// Row-major `k × d` centroid matrix.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub d: usize,
}

impl Codebook {
    pub fn new(centroids: Vec<f64>, k: usize, d: usize) -> Result<Self> {
        if k == 0 || centroids.len() != k * d {
            return Err(Error::Data("codebook shape mismatch".into()));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("codebook contains NaN/Inf".into()));
        }
        for a in 0..k {
            for b in (a + 1)..k {
                if centroids[a * d..(a + 1) * d] == centroids[b * d..(b + 1) * d] {
                    return Err(Error::Data(format!("duplicate centroids {a} and {b}")));
                }
            }
        }
        Ok(Codebook { centroids, k, d })
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.d..(i + 1) * self.d]
    }

    /// Nearest centroid index for a row (ties broken by lowest index).
    pub fn assign(&self, row: &[f32]) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..self.k {
            let d2 = dist2_mixed(row, self.centroid(c));
            if d2 < best_d {
                best_d = d2;
                best = c;
            }
        }
        best
    }
}

fn dist2_mixed(row: &[f32], centroid: &[f64]) -> f64 {
    row.iter()
        .zip(centroid)
        .map(|(&x, &c)| {
            let d = f64::from(x) - c;
            d * d
        })
        .sum()
}

/// Result of [`kmeans_fit`]: the codebook plus the objective value (sum of
/// squared distances) observed after each Lloyd iteration.
#[derive(Clone, Debug)]
pub struct KmeansFit {
    pub codebook: Codebook,
    /// Objective after each iteration's assignment step; non-increasing.
    pub objective_trace: Vec<f64>,
    pub assignments: Vec<usize>,
}

/// Fits `k` centroids to the row-major `n × d` matrix `x`.
pub fn kmeans_fit(x: &[f32], n: usize, d: usize, k: usize, seed: u64, max_iter: usize) -> Result<KmeansFit> {
    if n * d != x.len() {
        return Err(Error::Data("kmeans input shape mismatch".into()));
    }
    if n < k {
        return Err(Error::Data(format!("kmeans needs at least k={k} rows, got {n}")));
    }
    if k == 0 {
        return Err(Error::Data("kmeans needs k ≥ 1".into()));
    }
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // Distance-squared probabilistic seeding.
    let mut centroids: Vec<f64> = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..n);
    centroids.extend(row(first).iter().map(|&v| f64::from(v)));
    let mut min_d2: Vec<f64> = (0..n).map(|i| dist2_f32(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = min_d2.iter().sum();
        let next = if total > 0.0 {
            let dist = WeightedIndex::new(&min_d2)
                .map_err(|_| Error::Internal("seeding weights invalid".into()))?;
            dist.sample(&mut rng)
        } else {
            return Err(Error::Data("fewer than k distinct rows".into()));
        };
        let chosen: Vec<f64> = row(next).iter().map(|&v| f64::from(v)).collect();
        for i in 0..n {
            let d2 = dist2_mixed(row(i), &chosen);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
        centroids.extend_from_slice(&chosen);
    }

    let mut assignments = vec![0usize; n];
    let mut objective_trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        // Assignment step (ties → lowest index via strict less-than scan).
        let mut changed = false;
        let mut objective = 0.0;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d2 = dist2_mixed(row(i), &centroids[c * d..(c + 1) * d]);
                if d2 < best_d {
                    best_d = d2;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            objective += best_d;
        }
        objective_trace.push(objective);
        if !changed && objective_trace.len() > 1 {
            break;
        }

        // Update step: means per cluster.
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(row(i)) {
                *s += f64::from(v);
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        // Reseed empty clusters to the point farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let (far, _) = (0..n)
                    .map(|i| {
                        let a = assignments[i];
                        (i, dist2_mixed(row(i), &centroids[a * d..(a + 1) * d]))
                    })
                    .max_by(|(_, da), (_, db)| da.partial_cmp(db).unwrap())
                    .expect("n ≥ 1");
                for j in 0..d {
                    centroids[c * d + j] = f64::from(row(far)[j]);
                }
                assignments[far] = c;
            }
        }
    }

    let codebook = Codebook::new(centroids, k, d)?;
    Ok(KmeansFit { codebook, objective_trace, assignments })
}
