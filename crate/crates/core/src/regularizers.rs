//! Penalties on the collection of factor matrices and their exact gradients.
//!
//! * `rho`: scaled squared Frobenius norm, caps the largest singular value.
//! * `tau`: squared log of the smoothed Gram determinant, keeps the singular
//!   values away from zero and from blowing up together.
//! * `g`:   smoothed row-wise ℓ_p penalty that drives entries to zero.
//!
//! In `rho` and `tau`, `T` is the number of factors in the collection and `k`
//! is `min(rows, cols)` of each factor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    /// Smoothing inside the log of `tau`.
    pub nu: f64,
    /// Smoothing inside the power of `g`.
    pub varpi: f64,
    /// Sparsity exponent of `g`.
    pub p: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            mu1: 0.0,
            mu2: 0.0,
            mu3: 0.0,
            nu: 1e-4,
            varpi: 1e-6,
            p: 1.0,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu1", self.mu1), ("mu2", self.mu2), ("mu3", self.mu3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return Err(Error::param("nu", format!("must lie in (0, 1), got {}", self.nu)));
        }
        check_sparsity_params(self.p, self.varpi)
    }
}

fn check_sparsity_params(p: f64, varpi: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::param("p", format!("must lie in (0, 1], got {p}")));
    }
    if !(varpi > 0.0 && varpi < 1.0) {
        return Err(Error::param("varpi", format!("must lie in (0, 1), got {varpi}")));
    }
    Ok(())
}

pub fn rho_value(factors: &[Matrix]) -> f64 {
    let t = factors.len() as f64;
    factors
        .iter()
        .map(|a| {
            let k = a.min_dim() as f64;
            a.frobenius_norm_sq() / (2.0 * t * k * k)
        })
        .sum()
}

/// `A / (T k²)` per factor.
pub fn rho_grad(factors: &[Matrix]) -> Vec<Matrix> {
    let t = factors.len() as f64;
    factors
        .iter()
        .map(|a| {
            let k = a.min_dim() as f64;
            a.scale(1.0 / (t * k * k))
        })
        .collect()
}

/// Per-factor pieces of `tau`: `s = log(det/k)` and `L = log(ν + det/k)`.
struct TauTerm {
    k: f64,
    log_det_over_k: f64,
    log_smoothed: f64,
}

impl TauTerm {
    fn new(logdet: f64, k: usize, nu: f64) -> Self {
        let k = k as f64;
        let s = logdet - k.ln();
        // log(ν + e^s) without overflowing e^s
        let log_smoothed = if s > 0.0 {
            s + (nu * (-s).exp()).ln_1p()
        } else {
            (nu + s.exp()).ln()
        };
        Self {
            k,
            log_det_over_k: s,
            log_smoothed,
        }
    }

    /// `(d/k) / (ν + d/k)`, zero for a singular Gram matrix.
    fn det_fraction(&self, nu: f64) -> f64 {
        if self.log_det_over_k == f64::NEG_INFINITY {
            0.0
        } else {
            1.0 / (1.0 + nu * (-self.log_det_over_k).exp())
        }
    }
}

fn check_tau_factor(a: &Matrix) -> Result<()> {
    if a.min_dim() < 2 {
        return Err(Error::param(
            "tau",
            format!(
                "factor {}x{} has k = {} < 2, so log k is not positive",
                a.rows(),
                a.cols(),
                a.min_dim()
            ),
        ));
    }
    Ok(())
}

/// `(1 / (4 T k log k)) Σ_t log²(ν + det(Gram(A_t)) / k)`.
pub fn tau_value(factors: &[Matrix], nu: f64) -> Result<f64> {
    let t = factors.len() as f64;
    let mut total = 0.0;
    for a in factors {
        check_tau_factor(a)?;
        let term = TauTerm::new(linalg::gram_logdet(a)?, a.min_dim(), nu);
        total += term.log_smoothed.powi(2) / (4.0 * t * term.k * term.k.ln());
    }
    Ok(total)
}

/// Exact gradient of [`tau_value`].
///
/// Per factor this is `L / (T k log k) · (d/k)/(ν + d/k) · U Σ⁻¹ Vᵀ`, where
/// `U Σ⁻¹ Vᵀ = A (AᵀA)⁻¹` for tall `A`. A singular factor contributes zero.
pub fn tau_grad(factors: &[Matrix], nu: f64) -> Result<Vec<Matrix>> {
    let t = factors.len() as f64;
    let mut out = Vec::with_capacity(factors.len());
    for a in factors {
        check_tau_factor(a)?;
        let svd = linalg::svd(a)?;
        let logdet = linalg::gram_logdet_from_svd(&svd, a.rows(), a.cols());
        let term = TauTerm::new(logdet, a.min_dim(), nu);
        let frac = term.det_fraction(nu);
        if frac == 0.0 {
            out.push(Matrix::zeros(a.rows(), a.cols()));
            continue;
        }
        let coef = term.log_smoothed / (t * term.k * term.k.ln()) * frac;
        out.push(svd.pinv_transpose().scale(coef));
    }
    Ok(out)
}

/// `(1 / 2k₁) Σ_i (Σ_j (a_ij² + ϖ)^{p/2})²` for a `k₁ × k₂` matrix.
pub fn g_value(a: &Matrix, p: f64, varpi: f64) -> Result<f64> {
    check_sparsity_params(p, varpi)?;
    let k1 = a.rows();
    let total: f64 = row_sums(a, p, varpi).iter().map(|s| s * s).sum();
    Ok(total / (2.0 * k1 as f64))
}

fn row_sums(a: &Matrix, p: f64, varpi: f64) -> Vec<f64> {
    let mut sums = vec![0.0; a.rows()];
    for j in 0..a.cols() {
        for (i, s) in sums.iter_mut().enumerate() {
            let x = a[(i, j)];
            *s += (x * x + varpi).powf(p / 2.0);
        }
    }
    sums
}

/// `∂g/∂a_ij = (1/k₁) · r_i · p · a_ij (a_ij² + ϖ)^{p/2 − 1}` with `r_i` the row sum.
pub fn g_grad(a: &Matrix, p: f64, varpi: f64) -> Result<Matrix> {
    check_sparsity_params(p, varpi)?;
    let k1 = a.rows() as f64;
    let sums = row_sums(a, p, varpi);
    Ok(Matrix::from_fn(a.rows(), a.cols(), |i, j| {
        let x = a[(i, j)];
        sums[i] * p * x * (x * x + varpi).powf(p / 2.0 - 1.0) / k1
    }))
}

/// Sum of [`g_value`] over every factor.
pub fn g_value_all(factors: &[Matrix], p: f64, varpi: f64) -> Result<f64> {
    factors.iter().map(|a| g_value(a, p, varpi)).sum()
}

pub fn g_grad_all(factors: &[Matrix], p: f64, varpi: f64) -> Result<Vec<Matrix>> {
    factors.iter().map(|a| g_grad(a, p, varpi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel(a: f64, b: f64) -> f64 {
        if a == b {
            0.0
        } else {
            (a - b).abs() / a.abs().max(b.abs())
        }
    }

    /// Central differences of `f` over every entry of every factor.
    fn finite_diff(factors: &[Matrix], f: impl Fn(&[Matrix]) -> f64) -> Vec<Matrix> {
        let mut out = Vec::new();
        for t in 0..factors.len() {
            let mut g = Matrix::zeros(factors[t].rows(), factors[t].cols());
            for idx in 0..factors[t].len() {
                let x = factors[t].as_slice()[idx];
                let h = 1e-6 * x.abs().max(1.0);
                let mut fp = factors.to_vec();
                fp[t].as_mut_slice()[idx] = x + h;
                let mut fm = factors.to_vec();
                fm[t].as_mut_slice()[idx] = x - h;
                g.as_mut_slice()[idx] = (f(&fp) - f(&fm)) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn assert_grad_close(analytic: &[Matrix], numeric: &[Matrix], tol: f64) {
        for (a, n) in analytic.iter().zip(numeric) {
            let scale = a.max_abs().max(n.max_abs()).max(1e-12);
            for (x, y) in a.as_slice().iter().zip(n.as_slice()) {
                assert!(
                    (x - y).abs() <= tol * scale,
                    "analytic {x} vs numeric {y} (scale {scale})"
                );
            }
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = RegularizerConfig::default();
        assert_eq!((c.nu, c.varpi, c.p), (1e-4, 1e-6, 1.0));
        c.validate().unwrap();
        assert!(RegularizerConfig { p: 0.0, ..c }.validate().is_err());
        assert!(RegularizerConfig { p: 1.5, ..c }.validate().is_err());
        assert!(RegularizerConfig { nu: 1.0, ..c }.validate().is_err());
        assert!(RegularizerConfig { varpi: 0.0, ..c }.validate().is_err());
        assert!(RegularizerConfig { mu2: -1.0, ..c }.validate().is_err());
    }

    #[test]
    fn rho_cases() {
        assert_eq!(rho_value(&[Matrix::zeros(3, 2)]), 0.0);
        for k in 1..5 {
            assert_eq!(rho_value(&[Matrix::identity(k)]), 1.0 / (2.0 * k as f64));
        }
        let g = rho_grad(&[Matrix::identity(2)]);
        assert_eq!(g[0], Matrix::identity(2).scale(0.25));
        assert_eq!(rho_grad(&[Matrix::zeros(2, 3)])[0], Matrix::zeros(2, 3));
    }

    #[test]
    fn rho_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let f = vec![random_matrix(&mut rng, 3, 4), random_matrix(&mut rng, 5, 2)];
        let mut direct = 0.0;
        for a in &f {
            let k = a.rows().min(a.cols()) as f64;
            let mut s = 0.0;
            for i in 0..a.rows() {
                for j in 0..a.cols() {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
            direct += s / (2.0 * 2.0 * k * k);
        }
        assert!(rel(rho_value(&f), direct) < 1e-14);
    }

    #[test]
    fn rho_is_quadratic_in_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_matrix(&mut rng, 3, 3);
        let r = rho_value(std::slice::from_ref(&a));
        assert_eq!(rho_value(&[a.scale(2.0)]), 4.0 * r);
    }

    #[test]
    fn rho_grad_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..20 {
            let f = vec![random_matrix(&mut rng, 3, 4), random_matrix(&mut rng, 2, 2)];
            assert_grad_close(&rho_grad(&f), &finite_diff(&f, rho_value), 1e-6);
        }
    }

    #[test]
    fn tau_closed_forms() {
        let nu = 1e-4;
        let v = tau_value(&[Matrix::zeros(2, 2)], nu).unwrap();
        let expected = nu.ln().powi(2) / (8.0 * 2f64.ln());
        assert!(rel(v, expected) < 1e-15);

        let v = tau_value(&[Matrix::identity(2)], nu).unwrap();
        let expected = (nu + 0.5f64).ln().powi(2) / (8.0 * 2f64.ln());
        assert!(rel(v, expected) < 1e-14);
    }

    #[test]
    fn tau_rejects_thin_factors() {
        assert!(tau_value(&[Matrix::zeros(1, 5)], 1e-4).is_err());
        assert!(tau_grad(&[Matrix::zeros(5, 1)], 1e-4).is_err());
    }

    #[test]
    fn tau_matches_determinant_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let nu = 1e-4;
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 4, 3);
            let g = a.transpose().matmul(&a).unwrap();
            let det = g[(0, 0)] * (g[(1, 1)] * g[(2, 2)] - g[(1, 2)] * g[(2, 1)])
                - g[(0, 1)] * (g[(1, 0)] * g[(2, 2)] - g[(1, 2)] * g[(2, 0)])
                + g[(0, 2)] * (g[(1, 0)] * g[(2, 1)] - g[(1, 1)] * g[(2, 0)]);
            let k = 3.0f64;
            let expected = (nu + det / k).ln().powi(2) / (4.0 * k * k.ln());
            assert!(rel(tau_value(&[a], nu).unwrap(), expected) < 1e-10);
        }
    }

    #[test]
    fn tau_grad_vanishes_at_stationary_point() {
        // det(AᵀA)/k = 1 − ν makes the outer log zero
        let nu = 1e-4;
        let k = 2.0f64;
        let c = (k * (1.0 - nu)).powf(0.25);
        let g = tau_grad(&[Matrix::identity(2).scale(c)], nu).unwrap();
        assert!(g[0].max_abs() < 1e-12);
    }

    #[test]
    fn tau_grad_zero_for_singular() {
        let g = tau_grad(&[Matrix::zeros(3, 2)], 1e-4).unwrap();
        assert_eq!(g[0], Matrix::zeros(3, 2));
    }

    #[test]
    fn tau_grad_finite_differences_scaled_identity() {
        let nu = 1e-4;
        for c in [0.5, 1.0, 2.0] {
            let f = vec![Matrix::identity(2).scale(c)];
            let num = finite_diff(&f, |x| tau_value(x, nu).unwrap());
            assert_grad_close(&tau_grad(&f, nu).unwrap(), &num, 1e-5);
        }
    }

    #[test]
    fn tau_grad_finite_differences_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let nu = 1e-4;
        let mut checked = 0;
        while checked < 20 {
            let f = vec![random_matrix(&mut rng, 3, 3), random_matrix(&mut rng, 4, 2), random_matrix(&mut rng, 2, 3)];
            if f.iter().any(|a| linalg::condition_number(a).map_or(true, |k| k > 50.0)) {
                continue;
            }
            let num = finite_diff(&f, |x| tau_value(x, nu).unwrap());
            assert_grad_close(&tau_grad(&f, nu).unwrap(), &num, 1e-5);
            checked += 1;
        }
    }

    #[test]
    fn g_closed_forms() {
        let varpi = 1e-6;
        let v = g_value(&Matrix::zeros(3, 4), 1.0, varpi).unwrap();
        assert!(rel(v, 16.0 * varpi / 2.0) < 1e-12);

        let a = Matrix::from_rows(&[&[0.7]]).unwrap();
        let v = g_value(&a, 1.0, 1e-12).unwrap();
        assert!((v - 0.49 / 2.0).abs() < 1e-9);
        let g = g_grad(&a, 1.0, 1e-12).unwrap();
        assert!((g[(0, 0)] - 0.7).abs() < 1e-9);

        assert_eq!(g_grad(&Matrix::zeros(2, 3), 0.5, varpi).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn g_rejects_bad_parameters() {
        let a = Matrix::identity(2);
        assert!(g_value(&a, 0.0, 1e-6).is_err());
        assert!(g_value(&a, 1.0, 1.0).is_err());
        assert!(g_grad(&a, 2.0, 1e-6).is_err());
    }

    #[test]
    fn g_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let a = random_matrix(&mut rng, 3, 4);
        let (p, varpi) = (0.5, 1e-3);
        let mut direct = 0.0;
        for i in 0..3 {
            let mut row = 0.0;
            for j in 0..4 {
                row += (a[(i, j)].powi(2) + varpi).powf(p / 2.0);
            }
            direct += row * row;
        }
        direct /= 2.0 * 3.0;
        assert!(rel(g_value(&a, p, varpi).unwrap(), direct) < 1e-14);
    }

    #[test]
    fn g_grad_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for p in [0.5, 1.0] {
            for _ in 0..20 {
                let a = random_matrix(&mut rng, 3, 4);
                let varpi = 1e-3;
                let num = finite_diff(std::slice::from_ref(&a), |x| g_value(&x[0], p, varpi).unwrap());
                assert_grad_close(&[g_grad(&a, p, varpi).unwrap()], &num, 1e-5);
            }
        }
    }

    #[test]
    fn g_monotone_in_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..50 {
            let a = random_matrix(&mut rng, 2, 3);
            let (i, j) = (rng.random_range(0..2), rng.random_range(0..3));
            let mut b = a.clone();
            b[(i, j)] = a[(i, j)] * rng.random_range(1.0..3.0);
            assert!(g_value(&b, 1.0, 1e-6).unwrap() >= g_value(&a, 1.0, 1e-6).unwrap());
        }
    }

    #[test]
    fn penalties_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        for _ in 0..20 {
            let f = vec![random_matrix(&mut rng, 3, 2), random_matrix(&mut rng, 2, 2)];
            assert!(rho_value(&f) >= 0.0);
            assert!(tau_value(&f, 1e-4).unwrap() >= 0.0);
            assert!(g_value_all(&f, 0.5, 1e-6).unwrap() >= 0.0);
        }
    }
}
