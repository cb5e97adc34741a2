//! Spectral tools for small dense matrices.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. Every matrix in this
//! crate is a Kronecker factor of at most a few hundred rows, which is the size
//! range where Jacobi is both simple and accurate to high relative precision.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAX_SWEEPS: usize = 80;

/// Thin SVD `A = U · diag(σ) · Vᵀ` with `k = min(rows, cols)` components.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows × k`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// `cols × k`, orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    pub fn sigma_min(&self) -> f64 {
        self.singular_values.last().copied().unwrap_or(0.0)
    }

    /// `U · diag(σ) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        Matrix::from_fn(m, n, |i, j| {
            self.singular_values
                .iter()
                .enumerate()
                .map(|(p, s)| self.u[(i, p)] * s * self.v[(j, p)])
                .sum()
        })
    }

    /// `U · diag(1/σ) · Vᵀ`, i.e. the transposed pseudo-inverse.
    ///
    /// For a tall full-rank `A` this equals `A (AᵀA)⁻¹`. Caller guarantees every
    /// singular value is nonzero.
    pub fn pinv_transpose(&self) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        Matrix::from_fn(m, n, |i, j| {
            self.singular_values
                .iter()
                .enumerate()
                .map(|(p, s)| self.u[(i, p)] * self.v[(j, p)] / s)
                .sum()
        })
    }
}

/// Rank tolerance `1e-12 · σ_max · max(rows, cols)`.
pub fn rank_tolerance(sigma_max: f64, rows: usize, cols: usize) -> f64 {
    1e-12 * sigma_max * rows.max(cols) as f64
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    if !a.is_finite() {
        return Err(Error::NonFinite);
    }
    if a.rows() >= a.cols() {
        Ok(jacobi_tall(a))
    } else {
        let t = jacobi_tall(&a.transpose());
        Ok(Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(data: &mut [f64], rows: usize, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = data.split_at_mut(q * rows);
    let cp = &mut lo[p * rows..(p + 1) * rows];
    let cq = &mut hi[..rows];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// One-sided Jacobi for `rows ≥ cols`.
fn jacobi_tall(a: &Matrix) -> Svd {
    let (m, n) = (a.rows(), a.cols());
    let mut w = a.clone();
    let mut v = Matrix::identity(n);
    let tol = f64::EPSILON;

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(w.column(p), w.column(p));
                let beta = dot(w.column(q), w.column(q));
                let gamma = dot(w.column(p), w.column(q));
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(w.as_mut_slice(), m, p, q, c, s);
                rotate(v.as_mut_slice(), n, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n).map(|j| dot(w.column(j), w.column(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = sigma.first().copied().unwrap_or(0.0);
    // Columns this small carry no reliable direction; they are rebuilt below.
    let floor = smax * f64::EPSILON * m as f64;

    let mut u = Matrix::zeros(m, n);
    let mut vs = Matrix::zeros(n, n);
    let mut missing = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            vs[(i, dst)] = v[(i, src)];
        }
        if sigma[dst] > floor && sigma[dst] > 0.0 {
            for i in 0..m {
                u[(i, dst)] = w[(i, src)] / sigma[dst];
            }
        } else {
            missing.push(dst);
        }
    }
    complete_orthonormal(&mut u, &missing);

    Svd {
        u,
        singular_values: sigma,
        v: vs,
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every other column.
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    let m = u.rows();
    let mut filled: Vec<usize> = (0..u.cols()).filter(|j| !missing.contains(j)).collect();
    let mut basis = 0;
    for &col in missing {
        while basis < m {
            let mut cand = vec![0.0; m];
            cand[basis] = 1.0;
            basis += 1;
            // two passes of Gram-Schmidt
            for _ in 0..2 {
                for &j in &filled {
                    let proj = dot(&cand, u.column(j));
                    for (c, &x) in cand.iter_mut().zip(u.column(j)) {
                        *c -= proj * x;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-8 {
                for i in 0..m {
                    u[(i, col)] = cand[i] / norm;
                }
                filled.push(col);
                break;
            }
        }
    }
}

/// `κ(A) = σ_max / σ_min`.
pub fn condition_number(a: &Matrix) -> Result<f64> {
    let s = svd(a)?;
    condition_from_svd(&s, a.rows(), a.cols())
}

pub(crate) fn condition_from_svd(s: &Svd, rows: usize, cols: usize) -> Result<f64> {
    let tolerance = rank_tolerance(s.sigma_max(), rows, cols);
    let sigma_min = s.sigma_min();
    if sigma_min <= tolerance {
        return Err(Error::RankDeficient {
            sigma_min,
            tolerance,
        });
    }
    Ok(s.sigma_max() / sigma_min)
}

/// `log det` of the `k × k` Gram matrix, computed as `2 Σ log σ_i`.
///
/// For a tall or square matrix that Gram matrix is `AᵀA`; for a wide one it is
/// `AAᵀ`. Returns `f64::NEG_INFINITY` when the matrix is numerically rank
/// deficient.
pub fn gram_logdet(a: &Matrix) -> Result<f64> {
    let s = svd(a)?;
    Ok(gram_logdet_from_svd(&s, a.rows(), a.cols()))
}

pub(crate) fn gram_logdet_from_svd(s: &Svd, rows: usize, cols: usize) -> f64 {
    let tol = rank_tolerance(s.sigma_max(), rows, cols);
    if s.sigma_min() <= tol {
        return f64::NEG_INFINITY;
    }
    2.0 * s.singular_values.iter().map(|x| x.ln()).sum::<f64>()
}

pub fn numeric_rank(a: &Matrix) -> Result<usize> {
    let s = svd(a)?;
    let tol = rank_tolerance(s.sigma_max(), a.rows(), a.cols());
    Ok(s.singular_values.iter().filter(|&&x| x > tol).count())
}
