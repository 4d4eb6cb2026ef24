//! Small dense linear-algebra helpers over row-major `f64` buffers.
//!
//! Matrices across the crate are flat `Vec<f64>`/`Vec<f32>` row-major
//! buffers; this module wraps the few dense factorizations (SPD solves,
//! symmetric eigendecomposition) around nalgebra and provides the handful of
//! kernels (dot products, centering, power iteration) everything else
//! shares.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared Euclidean distance.
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared Euclidean distance between `f32` slices, accumulated in `f64`.
pub fn dist2_f32(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// L2 norm.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Column means of a row-major `n × d` matrix.
pub fn col_means(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    if n > 0 {
        for m in &mut mean {
            *m /= n as f64;
        }
    }
    mean
}

/// Solves the symmetric positive-definite system `A x = b` via Cholesky.
pub fn solve_spd(a: &[f64], n: usize, b: &[f64]) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let m = DMatrix::from_row_slice(n, n, a);
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Data("matrix not positive definite (try λ > 0)".into()))?;
    let x = chol.solve(&DVector::from_column_slice(b));
    Ok(x.iter().copied().collect())
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
/// Returns `(values, vectors)` with each eigenvector a row of `vectors`.
pub fn sym_eigen_desc(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(a.len(), n * n);
    let m = DMatrix::from_row_slice(n, n, a);
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let mut values = Vec::with_capacity(n);
    let mut vectors = vec![0.0; n * n];
    for (r, &i) in order.iter().enumerate() {
        values.push(eig.eigenvalues[i]);
        for c in 0..n {
            vectors[r * n + c] = eig.eigenvectors[(c, i)];
        }
    }
    (values, vectors)
}

/// First principal direction of a set of row vectors (power iteration on the
/// centered rows, no covariance materialization). Deterministic: starts from
/// the largest-norm centered row. Returns `None` when the rows have no
/// variance (all equal), which callers treat as "do not split".
pub fn first_principal_direction(rows: &[&[f64]]) -> Option<Vec<f64>> {
    let n = rows.len();
    if n == 0 {
        return None;
    }
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    // Deterministic start: the centered row with the largest norm.
    let (start, start_norm) = centered
        .iter()
        .enumerate()
        .map(|(i, r)| (i, norm(r)))
        .max_by(|(ia, na), (ib, nb)| na.partial_cmp(nb).unwrap().then(ib.cmp(ia)))?;
    if start_norm <= 1e-12 {
        return None;
    }
    let mut v: Vec<f64> = centered[start].iter().map(|x| x / start_norm).collect();
    let mut prev_lambda = 0.0;
    for _ in 0..100 {
        // v ← normalize(Σ_i r_i (r_i · v)) — one multiply by XᵀX.
        let mut next = vec![0.0; d];
        for r in &centered {
            let proj = dot(r, &v);
            for (nx, rv) in next.iter_mut().zip(r) {
                *nx += proj * rv;
            }
        }
        let lambda = norm(&next);
        if lambda <= 1e-12 {
            return None;
        }
        for x in &mut next {
            *x /= lambda;
        }
        // Fix sign for determinism: make the largest-magnitude component positive.
        v = next;
        if (lambda - prev_lambda).abs() <= 1e-12 * lambda.max(1.0) {
            break;
        }
        prev_lambda = lambda;
    }
    let pivot = v
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.abs().partial_cmp(&b.abs()).unwrap().then(ib.cmp(ia))
        })
        .map(|(i, _)| i)?;
    if v[pivot] < 0.0 {
        for x in &mut v {
            *x = -*x;
        }
    }
    Some(v)
}

/// Pearson correlation between two equal-length slices.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}
