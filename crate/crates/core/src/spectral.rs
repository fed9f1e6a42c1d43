//! Covariance and symmetric eigendecomposition.
//!
//! The eigensolver is a cyclic Jacobi iteration. It is exact enough for the
//! covariance matrices this crate feeds it (a few hundred features at most)
//! and needs nothing beyond plane rotations.

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Eigenvalues below zero but above `-NEGATIVE_CLAMP` are set to zero.
pub const NEGATIVE_CLAMP: f64 = 1e-9;
pub const MAX_SWEEPS: usize = 100;
const CONVERGENCE_RATIO: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct EigenDecomposition {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// `N×N`; column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: DenseArray,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        (0..self.dim()).map(|r| self.eigenvectors.at(r, i)).collect()
    }

    /// `V·diag(λ)·Vᵀ`.
    pub fn reconstruct(&self) -> DenseArray {
        let n = self.dim();
        let v = &self.eigenvectors;
        let mut out = DenseArray::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let s = (0..n)
                    .map(|p| v.at(i, p) * self.eigenvalues[p] * v.at(j, p))
                    .sum();
                out.set(i, j, s);
            }
        }
        out
    }
}

/// Sample covariance `X̃·X̃ᵀ / (L − 1)` of row-wise mean-centred data
/// `X̃` with shape `[features, time]`.
pub fn covariance(centered: &DenseArray) -> Result<DenseArray> {
    if centered.ndim() != 2 {
        return Err(Error::Shape(format!("covariance of {:?}", centered.shape())));
    }
    let (n, len) = (centered.rows(), centered.cols());
    if len < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 time steps, got {len}"
        )));
    }
    let denom = (len - 1) as f64;
    let mut out = DenseArray::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let s: f64 = centered
                .row(i)
                .iter()
                .zip(centered.row(j))
                .map(|(a, b)| a * b)
                .sum();
            out.set(i, j, s / denom);
            out.set(j, i, s / denom);
        }
    }
    Ok(out)
}

/// Eigendecomposition of a symmetric matrix. The input is symmetrised as
/// `(A + Aᵀ)/2` first.
///
/// Eigenvalues come back in descending order. Each eigenvector is signed so
/// that its largest-magnitude component is positive (the lowest index wins a
/// tie).
pub fn eigh(sym: &DenseArray) -> Result<EigenDecomposition> {
    if sym.ndim() != 2 || sym.rows() != sym.cols() {
        return Err(Error::Shape(format!("eigh of {:?}", sym.shape())));
    }
    if !sym.is_finite() {
        return Err(Error::NonFinite("eigh input".into()));
    }
    let n = sym.rows();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| 0.5 * (sym.at(i, j) + sym.at(j, i))).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let norm = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let tol = CONVERGENCE_RATIO * norm;
    let off_norm = |a: &[Vec<f64>]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i][j] * a[i][j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                rotate(&mut a, &mut v, p, q);
            }
        }
    }
    if !converged {
        let residual = off_norm(&a);
        if residual > tol {
            return Err(Error::NoConvergence {
                sweeps: MAX_SWEEPS,
                residual,
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]).then(i.cmp(&j)));

    let mut eigenvalues = Vec::with_capacity(n);
    let mut vectors = DenseArray::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        let mut lambda = a[src][src];
        if (-NEGATIVE_CLAMP..0.0).contains(&lambda) {
            lambda = 0.0;
        }
        eigenvalues.push(lambda);
        let mut vec: Vec<f64> = (0..n).map(|r| v[r][src]).collect();
        canonical_sign(&mut vec);
        for (r, x) in vec.into_iter().enumerate() {
            vectors.set(r, col, x);
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors: vectors,
    })
}

/// One Jacobi rotation zeroing `a[p][q]`: `A ← JᵀAJ`, `V ← VJ`.
fn rotate(a: &mut [Vec<f64>], v: &mut [Vec<f64>], p: usize, q: usize) {
    let n = a.len();
    let apq = a[p][q];
    let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
    let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    for row in a.iter_mut() {
        let (akp, akq) = (row[p], row[q]);
        row[p] = c * akp - s * akq;
        row[q] = s * akp + c * akq;
    }
    for k in 0..n {
        let (apk, aqk) = (a[p][k], a[q][k]);
        a[p][k] = c * apk - s * aqk;
        a[q][k] = s * apk + c * aqk;
    }
    a[p][q] = 0.0;
    a[q][p] = 0.0;
    for row in v.iter_mut() {
        let (vkp, vkq) = (row[p], row[q]);
        row[p] = c * vkp - s * vkq;
        row[q] = s * vkp + c * vkq;
    }
}

fn canonical_sign(vec: &mut [f64]) {
    let max = vec.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tie = 1e-12 * max.max(f64::MIN_POSITIVE);
    if let Some(lead) = vec.iter().position(|x| x.abs() >= max - tie) {
        if vec[lead] < 0.0 {
            vec.iter_mut().for_each(|x| *x = -*x);
        }
    }
}
