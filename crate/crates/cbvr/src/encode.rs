//! Fixed-length encodings of descriptor sets: (spatial-pyramid) bag of
//! words, VLAD residual aggregation, and Fisher vectors, plus the shared
//! post-normalization schemes.
//!
//! All encoders are permutation-invariant in descriptor order and produce a
//! dimension that depends only on their configuration, never on the number
//! of descriptors; an empty video encodes to the zero vector.

use crate::descriptors::DescriptorSet;
use crate::gmm::GmmModel;
use crate::kmeans::Codebook;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Pyramids
// ---------------------------------------------------------------------------

/// One pyramid level: a (x, y, t) grid. A descriptor falls in the cell
/// indexed by its normalized location.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub gx: usize,
    pub gy: usize,
    pub gt: usize,
}

impl Grid {
    pub const fn new(gx: usize, gy: usize, gt: usize) -> Self {
        Grid { gx, gy, gt }
    }

    pub fn cells(&self) -> usize {
        self.gx * self.gy * self.gt
    }

    fn cell_of(&self, coord: &[f32]) -> usize {
        let clamp = |v: f32, g: usize| -> usize {
            (((v as f64) * g as f64) as usize).min(g - 1)
        };
        let cx = clamp(coord[0], self.gx);
        let cy = clamp(coord[1], self.gy);
        let ct = clamp(coord[2], self.gt);
        (cx * self.gy + cy) * self.gt + ct
    }
}

/// A spatial pyramid: a list of grids whose per-level histograms are
/// concatenated. The default matches the common two-level layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pyramid {
    pub levels: Vec<Grid>,
}

impl Default for Pyramid {
    fn default() -> Self {
        Pyramid { levels: vec![Grid::new(1, 1, 1), Grid::new(2, 2, 1)] }
    }
}

impl Pyramid {
    /// The single-level pyramid: a plain (non-spatial) histogram.
    pub fn flat() -> Self {
        Pyramid { levels: vec![Grid::new(1, 1, 1)] }
    }

    pub fn total_cells(&self) -> usize {
        self.levels.iter().map(Grid::cells).sum()
    }
}

// ---------------------------------------------------------------------------
// Bag of words
// ---------------------------------------------------------------------------

/// Hard-assignment histogram over nearest centroids, one block of `k` counts
/// per pyramid cell, concatenated over levels with each level L1-normalized.
/// Output dimension: `k · Σ cells(level)`.
pub fn bow_encode(set: &DescriptorSet, codebook: &Codebook, pyramid: &Pyramid) -> Result<Vec<f32>> {
    if set.d_loc != codebook.d {
        return Err(Error::Data(format!(
            "descriptor dimension {} does not match codebook dimension {}",
            set.d_loc, codebook.d
        )));
    }
    let k = codebook.k;
    let dim: usize = k * pyramid.total_cells();
    let mut out = vec![0.0f64; dim];
    let m = set.m();
    if m == 0 {
        return Ok(vec![0.0; dim]);
    }
    let mut level_offset = 0usize;
    for grid in &pyramid.levels {
        let level_len = k * grid.cells();
        for i in 0..m {
            let word = codebook.assign(set.descriptor(i));
            let cell = grid.cell_of(set.coord(i));
            out[level_offset + cell * k + word] += 1.0;
        }
        let total: f64 = out[level_offset..level_offset + level_len].iter().sum();
        if total > 0.0 {
            for v in &mut out[level_offset..level_offset + level_len] {
                *v /= total;
            }
        }
        level_offset += level_len;
    }
    Ok(out.into_iter().map(|v| v as f32).collect())
}

// ---------------------------------------------------------------------------
// VLAD
// ---------------------------------------------------------------------------

/// Vector of locally aggregated descriptors: per-centroid sums of residuals
/// for hard assignments, each centroid block L2-normalized (intra), then the
/// whole vector L2-normalized. Output dimension `k·d`.
pub fn vlad_encode(set: &DescriptorSet, codebook: &Codebook) -> Result<Vec<f32>> {
    if set.d_loc != codebook.d {
        return Err(Error::Data(format!(
            "descriptor dimension {} does not match codebook dimension {}",
            set.d_loc, codebook.d
        )));
    }
    let (k, d) = (codebook.k, codebook.d);
    let mut acc = vec![0.0f64; k * d];
    let m = set.m();
    if m == 0 {
        return Ok(vec![0.0; k * d]);
    }
    for i in 0..m {
        let row = set.descriptor(i);
        let c = codebook.assign(row);
        let centroid = codebook.centroid(c);
        for j in 0..d {
            acc[c * d + j] += f64::from(row[j]) - centroid[j];
        }
    }
    // Intra (per-centroid) L2 normalization.
    for c in 0..k {
        let norm: f64 = acc[c * d..(c + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut acc[c * d..(c + 1) * d] {
                *v /= norm;
            }
        }
    }
    // Global L2.
    let norm: f64 = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut acc {
            *v /= norm;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

// ---------------------------------------------------------------------------
// Fisher vectors
// ---------------------------------------------------------------------------

/// Fisher vector without the final normalization: concatenated mean and
/// variance gradient blocks,
/// `u_k = (1/(m·√w_k)) Σ_i γ_i(k) (x_i − μ_k)/σ_k` and
/// `v_k = (1/(m·√(2w_k))) Σ_i γ_i(k) [((x_i − μ_k)/σ_k)² − 1]`.
/// Output dimension `2·K·d`.
pub fn fv_encode_raw(set: &DescriptorSet, gmm: &GmmModel) -> Result<Vec<f64>> {
    if set.d_loc != gmm.d {
        return Err(Error::Data(format!(
            "descriptor dimension {} does not match GMM dimension {}",
            set.d_loc, gmm.d
        )));
    }
    let (k, d) = (gmm.k, gmm.d);
    let mut out = vec![0.0f64; 2 * k * d];
    let m = set.m();
    if m == 0 {
        return Ok(out);
    }
    for i in 0..m {
        let row = set.descriptor(i);
        let (resp, _) = gmm.responsibilities(row);
        for c in 0..k {
            let g = resp[c];
            if g <= 0.0 {
                continue;
            }
            let mu = gmm.mean(c);
            let var = gmm.variance(c);
            for j in 0..d {
                let z = (f64::from(row[j]) - mu[j]) / var[j].sqrt();
                out[c * d + j] += g * z;
                out[(k + c) * d + j] += g * (z * z - 1.0);
            }
        }
    }
    let mf = m as f64;
    for c in 0..k {
        let su = 1.0 / (mf * gmm.weights[c].sqrt());
        let sv = 1.0 / (mf * (2.0 * gmm.weights[c]).sqrt());
        for j in 0..d {
            out[c * d + j] *= su;
            out[(k + c) * d + j] *= sv;
        }
    }
    Ok(out)
}

/// Fisher vector with the standard power (signed square root) and global L2
/// post-normalization applied.
pub fn fv_encode(set: &DescriptorSet, gmm: &GmmModel) -> Result<Vec<f32>> {
    let raw = fv_encode_raw(set, gmm)?;
    let raw32: Vec<f32> = raw.into_iter().map(|v| v as f32).collect();
    Ok(post_normalize(&raw32, NormScheme::PowerL2))
}

// ---------------------------------------------------------------------------
// Post-normalization
// ---------------------------------------------------------------------------

/// Vector post-normalization schemes shared by the encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormScheme {
    /// Signed square root of each component, then global L2.
    PowerL2,
    L2,
    L1,
    None,
}

impl std::str::FromStr for NormScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "power+l2" => Ok(NormScheme::PowerL2),
            "l2" => Ok(NormScheme::L2),
            "l1" => Ok(NormScheme::L1),
            "none" => Ok(NormScheme::None),
            other => Err(Error::Config(format!("unknown normalization scheme '{other}'"))),
        }
    }
}

/// Applies a normalization scheme; the zero vector always maps to itself.
pub fn post_normalize(v: &[f32], scheme: NormScheme) -> Vec<f32> {
    match scheme {
        NormScheme::None => v.to_vec(),
        NormScheme::L2 => {
            let norm: f64 = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter().map(|&x| (f64::from(x) / norm) as f32).collect()
            } else {
                v.to_vec()
            }
        }
        NormScheme::L1 => {
            let norm: f64 = v.iter().map(|&x| f64::from(x).abs()).sum();
            if norm > 0.0 {
                v.iter().map(|&x| (f64::from(x) / norm) as f32).collect()
            } else {
                v.to_vec()
            }
        }
        NormScheme::PowerL2 => {
            let powered: Vec<f32> = v
                .iter()
                .map(|&x| {
                    let fx = f64::from(x);
                    (fx.signum() * fx.abs().sqrt()) as f32
                })
                .collect();
            post_normalize(&powered, NormScheme::L2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VideoId;

    fn set_from(rows: &[&[f32]], coords: &[[f32; 3]]) -> DescriptorSet {
        let d = rows.first().map_or(1, |r| r.len());
        let descriptors: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let flat: Vec<f32> = coords.iter().flatten().copied().collect();
        DescriptorSet::new(VideoId::new("v").unwrap(), descriptors, flat, d).unwrap()
    }

    fn empty_set(d: usize) -> DescriptorSet {
        DescriptorSet::new(VideoId::new("v").unwrap(), vec![], vec![], d).unwrap()
    }

    fn codebook(rows: &[&[f64]]) -> Codebook {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Codebook::new(flat, rows.len(), d).unwrap()
    }

    #[test]
    fn bow_single_centroid_histogram() {
        let cb = codebook(&[&[0.0, 0.0], &[10.0, 10.0]]);
        let set = set_from(
            &[&[0.1, 0.0], &[0.0, 0.2], &[0.3, 0.1]],
            &[[0.5, 0.5, 0.5]; 3],
        );
        let h = bow_encode(&set, &cb, &Pyramid::flat()).unwrap();
        assert_eq!(h, vec![1.0, 0.0]);
    }

    #[test]
    fn bow_dimension_is_k_times_cells() {
        let cb = codebook(&[&[0.0], &[1.0], &[2.0]]);
        let set = set_from(&[&[0.0]], &[[0.0, 0.0, 0.0]]);
        let pyr = Pyramid::default(); // 1 + 4 cells
        let h = bow_encode(&set, &cb, &pyr).unwrap();
        assert_eq!(h.len(), 3 * 5);
        assert_eq!(bow_encode(&empty_set(1), &cb, &pyr).unwrap(), vec![0.0; 15]);
    }

    #[test]
    fn bow_pyramid_matches_hand_count() {
        // 6 descriptors on a 2×2×1 grid: quadrants get 3/1/2/0 hits, words
        // alternate between the two centroids.
        let cb = codebook(&[&[0.0], &[1.0]]);
        let rows: Vec<&[f32]> = vec![&[0.0], &[1.0], &[0.0], &[1.0], &[0.0], &[0.0]];
        let coords = [
            [0.1, 0.1, 0.5], // cell (0,0): word 0
            [0.2, 0.3, 0.5], // cell (0,0): word 1
            [0.3, 0.2, 0.5], // cell (0,0): word 0
            [0.2, 0.8, 0.5], // cell (0,1): word 1
            [0.9, 0.1, 0.5], // cell (1,0): word 0
            [0.8, 0.4, 0.5], // cell (1,0): word 0
        ];
        let set = set_from(&rows, &coords);
        let pyr = Pyramid { levels: vec![Grid::new(2, 2, 1)] };
        let h = bow_encode(&set, &cb, &pyr).unwrap();
        // Cells in (cx·gy + cy) order: (0,0), (0,1), (1,0), (1,1), each [w0, w1],
        // L1-normalized over the level (6 descriptors).
        let want: Vec<f32> = [2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0]
            .iter()
            .map(|c| c / 6.0)
            .collect();
        assert_eq!(h, want);
    }

    #[test]
    fn vlad_descriptor_equal_to_centroid_is_zero() {
        let cb = codebook(&[&[1.0, 2.0]]);
        let set = set_from(&[&[1.0, 2.0]], &[[0.0, 0.0, 0.0]]);
        assert_eq!(vlad_encode(&set, &cb).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn vlad_hand_residuals() {
        // k=1, centroid at origin, rows {(1,0),(0,1)} → normalize((1,1)).
        let cb = codebook(&[&[0.0, 0.0]]);
        let set = set_from(&[&[1.0, 0.0], &[0.0, 1.0]], &[[0.0; 3]; 2]);
        let v = vlad_encode(&set, &cb).unwrap();
        let expect = 1.0 / 2f32.sqrt();
        assert!((v[0] - expect).abs() < 1e-6);
        assert!((v[1] - expect).abs() < 1e-6);
    }

    #[test]
    fn vlad_invariant_to_descriptor_duplication() {
        let cb = codebook(&[&[0.0, 0.0], &[4.0, 4.0]]);
        let rows: Vec<&[f32]> = vec![&[1.0, 0.5], &[3.5, 4.5], &[0.2, -0.1]];
        let set = set_from(&rows, &[[0.0; 3]; 3]);
        let doubled_rows: Vec<&[f32]> =
            rows.iter().chain(rows.iter()).copied().collect();
        let doubled = set_from(&doubled_rows, &[[0.0; 3]; 6]);
        let a = vlad_encode(&set, &cb).unwrap();
        let b = vlad_encode(&doubled, &cb).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    fn toy_gmm(k: usize, d: usize) -> GmmModel {
        // Hand-built valid mixture.
        let weights = vec![1.0 / k as f64; k];
        let means: Vec<f64> = (0..k * d).map(|i| i as f64).collect();
        let variances = vec![0.5f64; k * d];
        GmmModel { weights, means, variances, k, d, var_floor: 1e-8 }
    }

    #[test]
    fn fv_dimension_is_2kd() {
        let gmm = toy_gmm(4, 3);
        let set = set_from(&[&[0.0, 1.0, 2.0]], &[[0.0; 3]]);
        assert_eq!(fv_encode(&set, &gmm).unwrap().len(), 2 * 4 * 3);
        assert_eq!(fv_encode(&empty_set(3), &gmm).unwrap(), vec![0.0; 24]);
        // The reference configuration: K=256, d=213 → 109056 dimensions.
        assert_eq!(2 * 256 * 213, 109056);
    }

    #[test]
    fn fv_mean_gradient_vanishes_at_component_mean() {
        // All descriptors exactly at component 0's mean with unit
        // responsibility (the other component is far away).
        let gmm = GmmModel {
            weights: vec![0.5, 0.5],
            means: vec![0.0, 0.0, 100.0, 100.0],
            variances: vec![1.0, 1.0, 1.0, 1.0],
            k: 2,
            d: 2,
            var_floor: 1e-8,
        };
        let set = set_from(&[&[0.0, 0.0], &[0.0, 0.0]], &[[0.0; 3]; 2]);
        let raw = fv_encode_raw(&set, &gmm).unwrap();
        for j in 0..2 {
            assert!(raw[j].abs() < 1e-6, "mean-gradient block {raw:?}");
        }
    }

    /// Independent analytic check of the K=1, d=1 Fisher vector.
    #[test]
    fn fv_k1_d1_matches_analytic_formula() {
        let gmm = GmmModel {
            weights: vec![1.0],
            means: vec![0.5],
            variances: vec![2.0],
            k: 1,
            d: 1,
            var_floor: 1e-8,
        };
        let xs = [1.0f32, -0.25, 0.75];
        let rows: Vec<&[f32]> = xs.iter().map(std::slice::from_ref).collect();
        let set = set_from(&rows, &[[0.0; 3]; 3]);
        let raw = fv_encode_raw(&set, &gmm).unwrap();
        // With w=1 and γ=1: u = (1/m)Σ (x−μ)/σ, v = (1/(m√2))Σ[((x−μ)/σ)²−1].
        let m = 3.0f64;
        let sigma = 2.0f64.sqrt();
        let zs: Vec<f64> = xs.iter().map(|&x| (f64::from(x) - 0.5) / sigma).collect();
        let u = zs.iter().sum::<f64>() / m;
        let v = zs.iter().map(|z| z * z - 1.0).sum::<f64>() / (m * 2.0f64.sqrt());
        assert!((raw[0] - u).abs() < 1e-9, "u {} vs {u}", raw[0]);
        assert!((raw[1] - v).abs() < 1e-9, "v {} vs {v}", raw[1]);
    }

    /// The FV blocks are Fisher-normalized gradients of the mean data
    /// log-likelihood; check against central finite differences on a K=2,
    /// d=2 toy.
    #[test]
    fn fv_gradients_match_finite_differences() {
        let gmm = GmmModel {
            weights: vec![0.4, 0.6],
            means: vec![0.0, 0.5, 2.0, -1.0],
            variances: vec![1.5, 0.8, 0.6, 1.2],
            k: 2,
            d: 2,
            var_floor: 1e-12,
        };
        let rows: Vec<&[f32]> = vec![&[0.3, 0.1], &[1.8, -0.7], &[0.9, 0.4], &[-0.5, 0.2]];
        let set = set_from(&rows, &[[0.0; 3]; 4]);
        let raw = fv_encode_raw(&set, &gmm).unwrap();
        let n = set.m();
        let x: Vec<f32> = set.descriptors.clone();
        let h = 1e-5;
        for c in 0..2 {
            for j in 0..2 {
                // Mean parameter: u_cj = (σ_cj/√w_c) · ∂(mean LL)/∂μ_cj.
                let mut plus = gmm.clone();
                plus.means[c * 2 + j] += h;
                let mut minus = gmm.clone();
                minus.means[c * 2 + j] -= h;
                let fd = (plus.mean_log_likelihood(&x, n) - minus.mean_log_likelihood(&x, n))
                    / (2.0 * h);
                let sigma = gmm.variances[c * 2 + j].sqrt();
                let want = fd * sigma / gmm.weights[c].sqrt();
                let got = raw[c * 2 + j];
                assert!(
                    (got - want).abs() <= 1e-4 * want.abs().max(1e-3),
                    "mean grad ({c},{j}): fv {got} vs fd {want}"
                );

                // Sigma parameter: v_cj = (σ_cj/√(2w_c)) · ∂(mean LL)/∂σ_cj.
                let mut plus = gmm.clone();
                let mut minus = gmm.clone();
                let sp = sigma + h;
                let sm = sigma - h;
                plus.variances[c * 2 + j] = sp * sp;
                minus.variances[c * 2 + j] = sm * sm;
                let fd = (plus.mean_log_likelihood(&x, n) - minus.mean_log_likelihood(&x, n))
                    / (2.0 * h);
                let want = fd * sigma / (2.0 * gmm.weights[c]).sqrt();
                let got = raw[(2 + c) * 2 + j];
                assert!(
                    (got - want).abs() <= 1e-4 * want.abs().max(1e-3),
                    "variance grad ({c},{j}): fv {got} vs fd {want}"
                );
            }
        }
    }

    #[test]
    fn encoders_permutation_invariant() {
        let cb = codebook(&[&[0.0, 0.0], &[2.0, 2.0]]);
        let rows: Vec<&[f32]> = vec![&[0.5, 0.1], &[1.9, 2.2], &[0.1, -0.3], &[2.5, 1.8]];
        let coords = [[0.1, 0.2, 0.3], [0.7, 0.8, 0.1], [0.4, 0.9, 0.6], [0.2, 0.2, 0.9]];
        let fwd = set_from(&rows, &coords);
        let rev_rows: Vec<&[f32]> = rows.iter().rev().copied().collect();
        let rev_coords: Vec<[f32; 3]> = coords.iter().rev().copied().collect();
        let rev = set_from(&rev_rows, &rev_coords);

        let pyr = Pyramid::default();
        assert_eq!(bow_encode(&fwd, &cb, &pyr).unwrap(), bow_encode(&rev, &cb, &pyr).unwrap());
        let va = vlad_encode(&fwd, &cb).unwrap();
        let vb = vlad_encode(&rev, &cb).unwrap();
        for (a, b) in va.iter().zip(&vb) {
            assert!((a - b).abs() < 1e-6);
        }
        let gmm = toy_gmm(2, 2);
        let fa = fv_encode(&fwd, &gmm).unwrap();
        let fb = fv_encode(&rev, &gmm).unwrap();
        for (a, b) in fa.iter().zip(&fb) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn post_normalize_schemes() {
        // power+l2 on (1, −4): signed sqrt → (1, −2), L2 → (1,−2)/√5.
        let out = post_normalize(&[1.0, -4.0], NormScheme::PowerL2);
        assert!((out[0] - 0.4472136).abs() < 1e-6);
        assert!((out[1] + 0.8944272).abs() < 1e-6);
        // L1 of (1, 3) → (0.25, 0.75).
        assert_eq!(post_normalize(&[1.0, 3.0], NormScheme::L1), vec![0.25, 0.75]);
        // Zero maps to zero under all schemes.
        for scheme in [NormScheme::PowerL2, NormScheme::L2, NormScheme::L1, NormScheme::None] {
            assert_eq!(post_normalize(&[0.0, 0.0], scheme), vec![0.0, 0.0]);
        }
    }
}
