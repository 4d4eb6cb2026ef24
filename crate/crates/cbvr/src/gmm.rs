//! Diagonal-covariance Gaussian mixture fitting by EM, used as the
//! generative model behind Fisher-vector encoding.
//!
//! Initialization comes from [`crate::kmeans::kmeans_fit`]; responsibilities
//! are computed in log space with log-sum-exp; per-dimension variances are
//! floored at `1e-4` of the mean feature variance so degenerate inputs
//! cannot blow up later gradient computations.

use crate::kmeans::kmeans_fit;
use crate::{Error, Result};

/// A fitted diagonal-covariance Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    /// Mixture weights: positive, summing to 1.
    pub weights: Vec<f64>,
    /// Row-major `K × d` component means.
    pub means: Vec<f64>,
    /// Row-major `K × d` per-dimension variances, each ≥ the floor.
    pub variances: Vec<f64>,
    pub k: usize,
    pub d: usize,
    /// The variance floor that was enforced.
    pub var_floor: f64,
}

impl GmmModel {
    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.d..(c + 1) * self.d]
    }

    pub fn variance(&self, c: usize) -> &[f64] {
        &self.variances[c * self.d..(c + 1) * self.d]
    }

    /// Log joint density `log(w_c · N(x | μ_c, σ²_c))` for one component.
    pub fn log_joint(&self, c: usize, x: &[f32]) -> f64 {
        let mut acc = self.weights[c].ln();
        let mu = self.mean(c);
        let var = self.variance(c);
        for j in 0..self.d {
            let diff = f64::from(x[j]) - mu[j];
            acc += -0.5 * ((2.0 * std::f64::consts::PI * var[j]).ln() + diff * diff / var[j]);
        }
        acc
    }

    /// Per-component responsibilities for `x` (sums to 1) plus the log
    /// density `log p(x)`, evaluated stably via log-sum-exp.
    pub fn responsibilities(&self, x: &[f32]) -> (Vec<f64>, f64) {
        let logs: Vec<f64> = (0..self.k).map(|c| self.log_joint(c, x)).collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let log_px = max + sum_exp.ln();
        let resp = logs.iter().map(|l| (l - log_px).exp()).collect();
        (resp, log_px)
    }

    /// Mean log-likelihood of a row-major `n × d` sample.
    pub fn mean_log_likelihood(&self, x: &[f32], n: usize) -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let (_, lp) = self.responsibilities(&x[i * self.d..(i + 1) * self.d]);
            total += lp;
        }
        total / n as f64
    }
}

/// Result of [`gmm_fit`]: the model plus the mean log-likelihood recorded
/// after every EM iteration (non-decreasing within 1e-9).
#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: GmmModel,
    pub log_likelihood_trace: Vec<f64>,
}

/// Fits a `K`-component diagonal GMM to the row-major `n × d` matrix `x`.
/// `var_floor` overrides the default floor of `1e-4 ×` the mean per-feature
/// variance of the data.
pub fn gmm_fit(
    x: &[f32],
    n: usize,
    d: usize,
    k: usize,
    seed: u64,
    max_iter: usize,
    var_floor: Option<f64>,
) -> Result<GmmFit> {
    if n * d != x.len() {
        return Err(Error::Data("gmm input shape mismatch".into()));
    }
    if n < k {
        return Err(Error::Data(format!("gmm needs at least K={k} rows, got {n}")));
    }
    let row = |i: usize| &x[i * d..(i + 1) * d];

    // Mean per-feature variance sets the default floor scale.
    let mut feat_mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in feat_mean.iter_mut().zip(row(i)) {
            *m += f64::from(v);
        }
    }
    for m in &mut feat_mean {
        *m /= n as f64;
    }
    let mut mean_var = 0.0;
    for i in 0..n {
        for j in 0..d {
            mean_var += (f64::from(row(i)[j]) - feat_mean[j]).powi(2);
        }
    }
    mean_var /= (n * d) as f64;
    let floor = var_floor.unwrap_or(1e-4 * mean_var).max(1e-12);

    // Initialize from k-means: means = centroids, weights = cluster
    // fractions, variances = within-cluster per-dimension variances.
    let km = kmeans_fit(x, n, d, k, seed, 25)?;
    let mut weights = vec![0.0f64; k];
    let mut means = km.codebook.centroids.clone();
    let mut variances = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let c = km.assignments[i];
        counts[c] += 1;
        for j in 0..d {
            variances[c * d + j] += (f64::from(row(i)[j]) - means[c * d + j]).powi(2);
        }
    }
    for c in 0..k {
        weights[c] = counts[c] as f64 / n as f64;
        for j in 0..d {
            let v = if counts[c] > 0 { variances[c * d + j] / counts[c] as f64 } else { 0.0 };
            variances[c * d + j] = v.max(floor);
        }
        weights[c] = weights[c].max(1e-10);
    }
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }

    let mut model = GmmModel { weights, means: means.clone(), variances: variances.clone(), k, d, var_floor: floor };
    let mut trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        // E step: responsibilities per row; track the data log-likelihood.
        let mut resp = vec![0.0f64; n * k];
        let mut ll = 0.0;
        for i in 0..n {
            let (r, lp) = model.responsibilities(row(i));
            resp[i * k..(i + 1) * k].copy_from_slice(&r);
            ll += lp;
        }
        trace.push(ll / n as f64);
        if trace.len() >= 2 {
            let prev = trace[trace.len() - 2];
            let curr = trace[trace.len() - 1];
            if curr < prev - 1e-9 {
                return Err(Error::Internal(format!(
                    "EM log-likelihood decreased: {prev} → {curr}"
                )));
            }
            if (curr - prev).abs() < 1e-10 {
                break;
            }
        }

        // M step: weighted moments with variance flooring.
        let mut nk = vec![0.0f64; k];
        means = vec![0.0; k * d];
        for i in 0..n {
            for c in 0..k {
                let g = resp[i * k + c];
                nk[c] += g;
                for j in 0..d {
                    means[c * d + j] += g * f64::from(row(i)[j]);
                }
            }
        }
        for c in 0..k {
            let denom = nk[c].max(1e-12);
            for j in 0..d {
                means[c * d + j] /= denom;
            }
        }
        variances = vec![0.0; k * d];
        for i in 0..n {
            for c in 0..k {
                let g = resp[i * k + c];
                for j in 0..d {
                    let diff = f64::from(row(i)[j]) - means[c * d + j];
                    variances[c * d + j] += g * diff * diff;
                }
            }
        }
        let mut weights = vec![0.0f64; k];
        for c in 0..k {
            let denom = nk[c].max(1e-12);
            for j in 0..d {
                variances[c * d + j] = (variances[c * d + j] / denom).max(floor);
            }
            weights[c] = (nk[c] / n as f64).max(1e-10);
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }
        model = GmmModel { weights, means: means.clone(), variances: variances.clone(), k, d, var_floor: floor };
    }

    Ok(GmmFit { model, log_likelihood_trace: trace })
}
