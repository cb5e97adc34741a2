//! Separable (Kronecker-factored) linear transformations.
//!
//! A [`SeparableTransform`] with factors `A⁽¹⁾ … A⁽ᵀ⁾` maps a tensor of shape
//! `(I₁, …, I_T)` to one of shape `(K₁, …, K_T)` by successive n-mode products.
//! Under the mode-0-fastest vectorization this is the same as multiplying
//! `vec(X)` by the dense matrix
//!
//! ```text
//! W = A⁽ᵀ⁾ ⊗ A⁽ᵀ⁻¹⁾ ⊗ … ⊗ A⁽¹⁾
//! ```
//!
//! (for `T = 2`, `vec(A X Bᵀ) = (B ⊗ A) vec(X)`). `W` is only ever built by
//! [`SeparableTransform::materialize`], for inspection and tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{kron_chain, nmode_product, Matrix, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparableTransform {
    factors: Vec<Matrix>,
    bias: Option<Vec<f64>>,
}

/// Parameter counts of a transform and of its dense equivalent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub separable: usize,
    pub dense: usize,
}

impl ParamCount {
    /// Structural compression ratio `dense / separable`.
    pub fn ratio(&self) -> f64 {
        self.dense as f64 / self.separable as f64
    }
}

/// Zero and nonzero counts of the factors and of the materialized matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub factor_nnz: Vec<usize>,
    pub factor_zeros: Vec<usize>,
    pub materialized_nnz: usize,
    pub materialized_zeros: usize,
    /// For two factors: `z_A·|B| + z_B·|A| − z_A·z_B`, the zero count of
    /// `A ⊗ B` predicted from the factor zero counts.
    pub predicted_zeros: Option<usize>,
}

impl SeparableTransform {
    pub fn new(factors: Vec<Matrix>, bias: Option<Vec<f64>>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::EmptyFactors);
        }
        let out_len: usize = factors.iter().map(Matrix::rows).product();
        if let Some(b) = &bias {
            if b.len() != out_len {
                return Err(Error::ShapeMismatch {
                    expected: vec![out_len],
                    actual: vec![b.len()],
                });
            }
        }
        Ok(Self { factors, bias })
    }

    pub fn identity(extents: &[usize]) -> Result<Self> {
        Self::new(extents.iter().map(|&n| Matrix::identity(n)).collect(), None)
    }

    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [Matrix] {
        &mut self.factors
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    /// Factors and bias borrowed mutably together.
    pub fn params_mut(&mut self) -> (&mut [Matrix], Option<&mut [f64]>) {
        (&mut self.factors, self.bias.as_deref_mut())
    }

    /// Number of factors `T`.
    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::cols).collect()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::rows).collect()
    }

    pub fn input_len(&self) -> usize {
        self.factors.iter().map(Matrix::cols).product()
    }

    pub fn output_len(&self) -> usize {
        self.factors.iter().map(Matrix::rows).product()
    }

    /// Intermediate results `Z_t = Z_{t-1} ×_t A⁽ᵗ⁾` for `t = 1..T`, without bias.
    pub fn chain(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let expected = self.input_shape();
        if x.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch {
                expected,
                actual: x.shape().to_vec(),
            });
        }
        let mut out: Vec<Tensor> = Vec::with_capacity(self.factors.len());
        for (mode, a) in self.factors.iter().enumerate() {
            let prev = out.last().unwrap_or(x);
            let next = nmode_product(prev, a, mode)?;
            out.push(next);
        }
        Ok(out)
    }

    /// `X ×₁ A⁽¹⁾ ×₂ ⋯ ×_T A⁽ᵀ⁾ + unvec(b)`.
    pub fn forward_md(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self
            .chain(x)?
            .pop()
            .expect("at least one factor");
        if let Some(b) = &self.bias {
            for (v, bi) in y.vec_mut().iter_mut().zip(b) {
                *v += bi;
            }
        }
        Ok(y)
    }

    /// Vectorized form: `vec(forward_md(unvec(v)))`.
    pub fn forward_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::unvec(v, &self.input_shape()).map_err(|_| Error::ShapeMismatch {
            expected: vec![self.input_len()],
            actual: vec![v.len()],
        })?;
        Ok(self.forward_md(&x)?.into_vec())
    }

    /// The dense `(∏K_t) × (∏I_t)` matrix `W` with `forward_vec(v) = W v + b`.
    pub fn materialize(&self) -> Matrix {
        let reversed: Vec<Matrix> = self.factors.iter().rev().cloned().collect();
        kron_chain(&reversed).expect("at least one factor")
    }

    pub fn param_count(&self) -> ParamCount {
        let bias = self.bias.as_ref().map_or(0, Vec::len);
        ParamCount {
            separable: self.factors.iter().map(Matrix::len).sum::<usize>() + bias,
            dense: self.output_len() * self.input_len() + bias,
        }
    }

    /// `κ(W)` as the product of the factor condition numbers.
    pub fn condition_number(&self) -> Result<f64> {
        self.factors
            .iter()
            .try_fold(1.0, |acc, a| Ok(acc * linalg::condition_number(a)?))
    }

    pub fn sparsity_report(&self) -> SparsityReport {
        let factor_nnz: Vec<usize> = self.factors.iter().map(Matrix::nnz).collect();
        let factor_zeros: Vec<usize> = self
            .factors
            .iter()
            .zip(&factor_nnz)
            .map(|(a, nnz)| a.len() - nnz)
            .collect();
        let w = self.materialize();
        let materialized_nnz = w.nnz();
        let predicted_zeros = match self.factors.as_slice() {
            [a, b] => {
                let (za, zb) = (factor_zeros[0], factor_zeros[1]);
                Some(za * b.len() + zb * a.len() - za * zb)
            }
            _ => None,
        };
        SparsityReport {
            factor_nnz,
            factor_zeros,
            materialized_nnz,
            materialized_zeros: w.len() - materialized_nnz,
            predicted_zeros,
        }
    }
}

/// `regular / light`, the compression ratio of a lightweight model.
pub fn compression_ratio(regular_params: usize, light_params: usize) -> Result<f64> {
    if light_params == 0 {
        return Err(Error::DivisionByZero("lightweight parameter count is zero"));
    }
    Ok(regular_params as f64 / light_params as f64)
}

/// Parameter and cost ratios of the two-factor form `Y = A X Bᵀ` against a
/// dense `(K₁K₂) × (I₁I₂)` map, with `A: K₁×I₁`, `B: K₂×I₂`.
///
/// Returns `(1/(K₁I₁) + 1/(K₂I₂), 1/K₂ + 1/I₁)`.
pub fn separable_ratios_2d(k1: usize, i1: usize, k2: usize, i2: usize) -> (f64, f64) {
    let (k1, i1, k2, i2) = (k1 as f64, i1 as f64, k2 as f64, i2 as f64);
    (1.0 / (k1 * i1) + 1.0 / (k2 * i2), 1.0 / k2 + 1.0 / i1)
}

/// Parameter and cost ratios of the asymmetric convolution against a
/// depthwise-separable one; both reduce to `(k₁ + k₂ + n) / (k₁k₂ + n)`.
pub fn conv_ratios(k1: usize, k2: usize, n: usize) -> Result<(f64, f64)> {
    if k1 == 0 || k2 == 0 || n == 0 {
        return Err(Error::param("conv_ratios", "all sizes must be at least 1"));
    }
    let eta = (k1 + k2 + n) as f64 / (k1 * k2 + n) as f64;
    Ok((eta, eta))
}

/// Asymmetric convolution of a `p × q × c` input.
///
/// Stages, all stride 1 with valid padding (cross-correlation):
/// 1. `vertical` (`k₁ × c`, one column per channel) along mode 0,
/// 2. `horizontal` (`k₂ × c`) along mode 1,
/// 3. `mixing` (`n × c`) across channels.
///
/// Output shape is `(p − k₁ + 1) × (q − k₂ + 1) × n`.
pub fn asym_conv_forward(
    x: &Tensor,
    vertical: &Matrix,
    horizontal: &Matrix,
    mixing: &Matrix,
) -> Result<Tensor> {
    let &[p, q, c] = x.shape() else {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0],
            actual: x.shape().to_vec(),
        });
    };
    let (k1, k2) = (vertical.rows(), horizontal.rows());
    for m in [vertical, horizontal, mixing] {
        if m.cols() != c {
            return Err(Error::ShapeMismatch {
                expected: vec![m.rows(), c],
                actual: vec![m.rows(), m.cols()],
            });
        }
    }
    if p < k1 || q < k2 {
        return Err(Error::param(
            "asym_conv_forward",
            format!("filter {k1}x{k2} larger than input {p}x{q}"),
        ));
    }
    let (op, oq) = (p - k1 + 1, q - k2 + 1);

    let mut stage1 = Tensor::zeros(&[op, q, c])?;
    for ch in 0..c {
        for j in 0..q {
            for i in 0..op {
                let s: f64 = (0..k1).map(|a| vertical[(a, ch)] * x.get(&[i + a, j, ch])).sum();
                stage1.set(&[i, j, ch], s);
            }
        }
    }
    let mut stage2 = Tensor::zeros(&[op, oq, c])?;
    for ch in 0..c {
        for j in 0..oq {
            for i in 0..op {
                let s: f64 = (0..k2)
                    .map(|b| horizontal[(b, ch)] * stage1.get(&[i, j + b, ch]))
                    .sum();
                stage2.set(&[i, j, ch], s);
            }
        }
    }
    nmode_product(&stage2, mixing, 2)
}
