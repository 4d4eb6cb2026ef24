//! PCA projection of local descriptors and space-time coordinate
//! augmentation (appending normalized (x, y, t) to each projected row).

use crate::linalg::sym_eigen_desc;
use crate::{Error, Result};

/// A fitted PCA basis: the data mean and the top-`p` right singular vectors
/// of the centered data as orthonormal rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Row-major `p × d_loc`, rows orthonormal.
    pub components: Vec<f64>,
    pub p: usize,
    pub d_loc: usize,
    /// Singular values of the centered data for the kept components.
    pub singular_values: Vec<f64>,
    /// Fraction of total variance captured by the kept components.
    pub explained_variance_ratio: f64,
}

/// Fits PCA on the row-major `m × d_loc` matrix, keeping `p` components.
pub fn pca_fit(x: &[f32], m: usize, d_loc: usize, p: usize) -> Result<PcaModel> {
    if m * d_loc != x.len() {
        return Err(Error::Data("pca input shape mismatch".into()));
    }
    if p > d_loc {
        return Err(Error::Data(format!("pca target dimension {p} exceeds input {d_loc}")));
    }
    if m == 0 || p == 0 {
        return Err(Error::Data("pca needs data and p ≥ 1".into()));
    }
    let mut mean = vec![0.0f64; d_loc];
    for i in 0..m {
        for (s, &v) in mean.iter_mut().zip(&x[i * d_loc..(i + 1) * d_loc]) {
            *s += f64::from(v);
        }
    }
    for s in &mut mean {
        *s /= m as f64;
    }
    // Scatter matrix XcᵀXc of the centered data.
    let mut scatter = vec![0.0f64; d_loc * d_loc];
    let mut centered_row = vec![0.0f64; d_loc];
    for i in 0..m {
        for j in 0..d_loc {
            centered_row[j] = f64::from(x[i * d_loc + j]) - mean[j];
        }
        for a in 0..d_loc {
            let ca = centered_row[a];
            if ca != 0.0 {
                for b in a..d_loc {
                    scatter[a * d_loc + b] += ca * centered_row[b];
                }
            }
        }
    }
    for a in 0..d_loc {
        for b in 0..a {
            scatter[a * d_loc + b] = scatter[b * d_loc + a];
        }
    }
    let (eigvals, eigvecs) = sym_eigen_desc(&scatter, d_loc);
    let total: f64 = eigvals.iter().map(|&v| v.max(0.0)).sum();
    let kept: f64 = eigvals.iter().take(p).map(|&v| v.max(0.0)).sum();
    let components = eigvecs[..p * d_loc].to_vec();
    let singular_values = eigvals.iter().take(p).map(|&v| v.max(0.0).sqrt()).collect();
    let model = PcaModel {
        mean,
        components,
        p,
        d_loc,
        singular_values,
        explained_variance_ratio: if total > 0.0 { kept / total } else { 1.0 },
    };
    debug_assert!(model.rows_orthonormal(1e-6));
    Ok(model)
}

impl PcaModel {
    /// Checks row orthonormality of the component matrix within `tol`.
    pub fn rows_orthonormal(&self, tol: f64) -> bool {
        for a in 0..self.p {
            for b in a..self.p {
                let dot: f64 = (0..self.d_loc)
                    .map(|j| self.components[a * self.d_loc + j] * self.components[b * self.d_loc + j])
                    .sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                if (dot - expect).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Projects a row-major `m × d_loc` matrix: `(X − mean) · componentsᵀ`,
/// producing `m × p`.
pub fn pca_project(model: &PcaModel, x: &[f32], m: usize) -> Result<Vec<f32>> {
    if m * model.d_loc != x.len() {
        return Err(Error::Data("pca projection shape mismatch".into()));
    }
    let d = model.d_loc;
    let p = model.p;
    let mut out = vec![0.0f32; m * p];
    let mut centered = vec![0.0f64; d];
    for i in 0..m {
        for j in 0..d {
            centered[j] = f64::from(x[i * d + j]) - model.mean[j];
        }
        for c in 0..p {
            let mut acc = 0.0f64;
            for j in 0..d {
                acc += centered[j] * model.components[c * d + j];
            }
            out[i * p + c] = acc as f32;
        }
    }
    Ok(out)
}

/// Appends each row's (x, y, t) location to its projected descriptor,
/// producing `m × (p+3)`. Coordinates must already be normalized to [0, 1].
pub fn sted_augment(projected: &[f32], m: usize, p: usize, coords: &[f32]) -> Result<Vec<f32>> {
    if m * p != projected.len() {
        return Err(Error::Data("sted projected shape mismatch".into()));
    }
    if coords.len() != m * 3 {
        return Err(Error::Data("sted coords shape mismatch".into()));
    }
    if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::Data("sted coords outside [0,1]".into()));
    }
    let mut out = Vec::with_capacity(m * (p + 3));
    for i in 0..m {
        out.extend_from_slice(&projected[i * p..(i + 1) * p]);
        out.extend_from_slice(&coords[i * 3..(i + 1) * 3]);
    }
    Ok(out)
}
