//! Dense real tensors and matrices.
//!
//! Storage is column-major over modes: mode 0 varies fastest. For a matrix this
//! is the usual "stack the columns" vectorization, and `vec`/`unvec` are plain
//! views of the underlying buffer.
//!
//! Modes are 0-based throughout the API.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense matrix in column-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(vec![rows, cols]));
        }
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![rows, cols],
                actual: vec![data.len()],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix extents must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row slices, which reads naturally in literals.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::param("rows", "ragged row lengths"));
        }
        let mut m = Self::new(r, c, vec![0.0; r * c])?;
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `min(rows, cols)`, the number of singular values.
    pub fn min_dim(&self) -> usize {
        self.rows.min(self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cols, other.cols],
                actual: vec![other.rows, other.cols],
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for j in 0..other.cols {
            for p in 0..self.cols {
                let b = other[(p, j)];
                if b == 0.0 {
                    continue;
                }
                let col = self.column(p);
                let dst = &mut out.data[j * self.rows..(j + 1) * self.rows];
                for (d, &a) in dst.iter_mut().zip(col) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cols],
                actual: vec![v.len()],
            });
        }
        let mut out = vec![0.0; self.rows];
        for (j, &x) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.column(j)) {
                *o += a * x;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Number of entries that are not exactly zero.
    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Matrix) {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "axpy shape mismatch"
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i + self.rows * j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i + self.rows * j]
    }
}

/// Dense N-order tensor, mode 0 fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    /// Inverse of [`Tensor::vec`].
    pub fn unvec(v: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), v.to_vec())
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Column-stacking vectorization; borrows the storage.
    pub fn vec(&self) -> &[f64] {
        &self.data
    }

    pub fn vec_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Linear offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index order mismatch");
        let mut off = 0;
        let mut stride = 1;
        for (&i, &n) in index.iter().zip(&self.shape) {
            assert!(i < n, "index {i} out of bounds for extent {n}");
            off += i * stride;
            stride *= n;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0],
                actual: self.shape.clone(),
            });
        }
        Matrix::new(self.shape[0], self.shape[1], self.data.clone())
    }

    /// Extents before and after mode `n`: the tensor is viewed as `left × I_n × right`.
    fn split_at_mode(&self, n: usize) -> (usize, usize, usize) {
        let left = self.shape[..n].iter().product();
        let right = self.shape[n + 1..].iter().product();
        (left, self.shape[n], right)
    }

    fn check_mode(&self, n: usize) -> Result<()> {
        if n >= self.shape.len() {
            return Err(Error::ModeOutOfRange {
                mode: n,
                order: self.shape.len(),
            });
        }
        Ok(())
    }
}

/// n-mode product `x ×_n a`: contracts mode `n` of `x` with the columns of `a`.
///
/// The result replaces extent `I_n` by `a.rows()`. Each output entry is the sum
/// over `i_n` in ascending order.
pub fn nmode_product(x: &Tensor, a: &Matrix, n: usize) -> Result<Tensor> {
    x.check_mode(n)?;
    let (left, extent, right) = x.split_at_mode(n);
    if a.cols() != extent {
        return Err(Error::ShapeMismatch {
            expected: vec![a.rows(), extent],
            actual: vec![a.rows(), a.cols()],
        });
    }
    let k = a.rows();
    let mut shape = x.shape.clone();
    shape[n] = k;
    let mut out = vec![0.0; left * k * right];
    for r in 0..right {
        for kk in 0..k {
            let dst = &mut out[left * (kk + k * r)..left * (kk + k * r + 1)];
            for i in 0..extent {
                let coef = a[(kk, i)];
                let src = &x.data[left * (i + extent * r)..left * (i + extent * r + 1)];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s * coef;
                }
            }
        }
    }
    Tensor::new(shape, out)
}

/// Contracts every mode except `n` of two tensors that agree off mode `n`.
///
/// Returns the `g.shape[n] × z.shape[n]` matrix `Σ g[.., k, ..] z[.., i, ..]`.
/// This is the factor gradient of an n-mode product: if `y = z ×_n a` and
/// `g = ∂L/∂y`, then `∂L/∂a = mode_contract(g, z, n)`.
pub fn mode_contract(g: &Tensor, z: &Tensor, n: usize) -> Result<Matrix> {
    g.check_mode(n)?;
    z.check_mode(n)?;
    let (gl, k, gr) = g.split_at_mode(n);
    let (zl, extent, zr) = z.split_at_mode(n);
    if g.order() != z.order() || gl != zl || gr != zr {
        return Err(Error::ShapeMismatch {
            expected: g.shape.clone(),
            actual: z.shape.clone(),
        });
    }
    let mut out = Matrix::zeros(k, extent);
    for r in 0..gr {
        for i in 0..extent {
            let zs = &z.data[zl * (i + extent * r)..zl * (i + extent * r + 1)];
            for kk in 0..k {
                let gs = &g.data[gl * (kk + k * r)..gl * (kk + k * r + 1)];
                let dot: f64 = gs.iter().zip(zs).map(|(a, b)| a * b).sum();
                out[(kk, i)] += dot;
            }
        }
    }
    Ok(out)
}

/// Kronecker product; block `(i, j)` of the result is `a[i, j] · b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (rb, cb) = (b.rows(), b.cols());
    let mut out = Matrix::zeros(a.rows() * rb, a.cols() * cb);
    for j in 0..a.cols() {
        for i in 0..a.rows() {
            let s = a[(i, j)];
            for q in 0..cb {
                for p in 0..rb {
                    out[(i * rb + p, j * cb + q)] = s * b[(p, q)];
                }
            }
        }
    }
    out
}

/// Left fold of [`kron`] over `factors`.
pub fn kron_chain(factors: &[Matrix]) -> Result<Matrix> {
    let (first, rest) = factors.split_first().ok_or(Error::EmptyFactors)?;
    Ok(rest.iter().fold(first.clone(), |acc, f| kron(&acc, f)))
}
