use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_ITERS: usize = 500;
const REL_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    /// 2×D, orthonormal rows.
    pub components: Tensor<f64>,
    /// Per-point coordinates in the component basis.
    pub coords: Vec<[f64; 2]>,
    pub eigenvalues: [f64; 2],
    /// Eigenvalue over total variance.
    pub explained_variance_ratio: [f64; 2],
    pub mean: Vec<f64>,
}

/// Sample covariance (divisor M−1) of the rows of `x` and their mean.
pub fn covariance(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (m, d) = x.rows_cols();
    let mut mean = vec![0.0; d];
    for r in 0..m {
        mean.iter_mut().zip(x.row(r)).for_each(|(a, v)| *a += v / m as f64);
    }
    let mut cov = vec![0.0; d * d];
    let mut centred = vec![0.0; d];
    for r in 0..m {
        centred.iter_mut().zip(x.row(r)).zip(&mean).for_each(|((c, v), mu)| *c = v - mu);
        for i in 0..d {
            let ci = centred[i];
            for j in i..d {
                cov[i * d + j] += ci * centred[j];
            }
        }
    }
    let denom = (m.max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    (cov, mean)
}

fn mat_vec(a: &[f64], v: &[f64]) -> Vec<f64> {
    a.chunks(v.len()).map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dominant eigenpair of a symmetric positive semi-definite matrix by power
/// iteration, starting from `start`.
fn power_iteration(a: &[f64], start: Vec<f64>) -> (f64, Vec<f64>) {
    let mut v = start;
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let mut lambda = 0.0;
    for _ in 0..MAX_ITERS {
        let w = mat_vec(a, &v);
        let next: f64 = w.iter().zip(&v).map(|(x, y)| x * y).sum();
        let wn = norm(&w);
        if wn == 0.0 {
            return (0.0, v);
        }
        v = w.into_iter().map(|x| x / wn).collect();
        let done = (next - lambda).abs() <= REL_TOL * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    // Rayleigh quotient of the final vector
    let w = mat_vec(a, &v);
    (w.iter().zip(&v).map(|(x, y)| x * y).sum(), v)
}

/// Start vector with a component along every axis, so no eigenvector is
/// orthogonal to it by construction.
fn start_vector(d: usize) -> Vec<f64> {
    (0..d).map(|i| 1.0 + 0.1 * ((i as f64 + 1.0) * 0.618_033_988_75).fract()).collect()
}

/// Projects the rows of `features` (M×D, M ≥ 3) onto their top two
/// principal components, found by power iteration with deflation in 64-bit.
pub fn pca_2d(features: &Tensor<f64>) -> Result<PcaProjection> {
    if features.rank() != 2 || features.shape()[0] < 3 {
        return Err(Error::Validation(format!(
            "PCA needs an M×D matrix with M >= 3, got {:?}",
            features.shape()
        )));
    }
    let (m, d) = features.rows_cols();
    let (mut cov, mean) = covariance(features);
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if !(total > 0.0) {
        return Err(Error::Validation("degenerate input: all points are identical".into()));
    }

    let mut comps = Vec::with_capacity(2 * d);
    let mut eigenvalues = [0.0; 2];
    for (k, eig) in eigenvalues.iter_mut().enumerate() {
        let mut start = start_vector(d);
        // keep the start vector away from components already removed
        for c in comps.chunks(d) {
            let dot: f64 = start.iter().zip(c).map(|(a, b)| a * b).sum();
            start.iter_mut().zip(c).for_each(|(s, x)| *s -= dot * x);
        }
        if norm(&start) < 1e-12 {
            start = (0..d).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
        }
        let (lambda, v) = power_iteration(&cov, start);
        *eig = lambda.max(0.0);
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        comps.extend(v);
    }
    // re-orthogonalise the second component against the first
    let dot: f64 = (0..d).map(|i| comps[i] * comps[d + i]).sum();
    for i in 0..d {
        comps[d + i] -= dot * comps[i];
    }
    let n2 = norm(&comps[d..]);
    if n2 > 0.0 {
        comps[d..].iter_mut().for_each(|x| *x /= n2);
    }

    let coords = (0..m)
        .map(|r| {
            let row = features.row(r);
            let mut out = [0.0; 2];
            for (k, o) in out.iter_mut().enumerate() {
                *o = (0..d).map(|i| (row[i] - mean[i]) * comps[k * d + i]).sum();
            }
            out
        })
        .collect();
    Ok(PcaProjection {
        components: Tensor::new(&[2, d], comps)?,
        coords,
        eigenvalues,
        explained_variance_ratio: [eigenvalues[0] / total, eigenvalues[1] / total],
        mean,
    })
}
