//! Randomized property suite behind `kronsep verify`.
//!
//! Each property draws `trials` random cases from a seeded ChaCha8 stream and
//! reports the first violation. [`Fault::KronSign`] corrupts the Kronecker
//! products built here (one flipped entry) so the suite's own failure path can
//! be exercised.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::linalg::{condition_number, numeric_rank, svd};
use crate::nn::{Activation, LayerSpec, SepMlp};
use crate::regularizers::{g_grad_all, g_value_all, rho_grad, rho_value, tau_grad, tau_value};
use crate::septrans::SeparableTransform;
use crate::tensor::{kron, Matrix, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    KronSign,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub trials: usize,
    pub failure: Option<String>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

impl std::fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.failure {
            None => write!(f, "PASS  {:<32} trials={}", self.name, self.trials),
            Some(why) => write!(f, "FAIL  {:<32} trials={} {}", self.name, self.trials, why),
        }
    }
}

struct Ctx {
    rng: ChaCha8Rng,
    fault: Option<Fault>,
}

type Check = std::result::Result<(), String>;

impl Ctx {
    fn kron(&self, a: &Matrix, b: &Matrix) -> Matrix {
        let mut k = kron(a, b);
        if self.fault == Some(Fault::KronSign) && !k.is_empty() {
            k.as_mut_slice()[0] = -k.as_slice()[0];
        }
        k
    }

    /// Dense matrix of a separable transform: later factors on the left.
    fn materialize(&self, factors: &[Matrix]) -> Matrix {
        let mut w = factors[0].clone();
        for f in &factors[1..] {
            w = self.kron(f, &w);
        }
        w
    }

    fn matrix(&mut self, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| self.rng.random_range(-1.0..1.0))
    }

    fn int_matrix(&mut self, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| f64::from(self.rng.random_range(-5i32..=5)))
    }

    /// Random matrix with singular values in `[1, 10]`.
    fn well_conditioned(&mut self, n: usize) -> Matrix {
        let q1 = self.orthogonal(n);
        let q2 = self.orthogonal(n);
        let d: Vec<f64> = (0..n).map(|_| self.rng.random_range(1.0..10.0)).collect();
        q1.matmul(&Matrix::diag(&d)).unwrap().matmul(&q2).unwrap()
    }

    fn orthogonal(&mut self, n: usize) -> Matrix {
        let a = self.matrix(n, n);
        svd(&a).expect("finite").u
    }

    fn rank_deficient(&mut self, n: usize, rank: usize) -> Matrix {
        let l = self.matrix(n, rank);
        let r = self.matrix(rank, n);
        l.matmul(&r).unwrap()
    }

    fn dims(&mut self) -> (usize, usize) {
        (self.rng.random_range(1..=4), self.rng.random_range(1..=4))
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

fn run_property(ctx: &mut Ctx, trials: usize, mut f: impl FnMut(&mut Ctx, usize) -> Check) -> Option<String> {
    for t in 0..trials {
        if let Err(why) = f(ctx, t) {
            return Some(format!("trial {t}: {why}"));
        }
    }
    None
}

fn kron_associativity(ctx: &mut Ctx, _: usize) -> Check {
    let (a, b, c) = {
        let (r1, c1) = ctx.dims();
        let (r2, c2) = ctx.dims();
        let (r3, c3) = ctx.dims();
        (ctx.matrix(r1, c1), ctx.matrix(r2, c2), ctx.matrix(r3, c3))
    };
    let left = ctx.kron(&ctx.kron(&a, &b), &c);
    let right = ctx.kron(&a, &ctx.kron(&b, &c));
    let d = max_rel_diff(left.as_slice(), right.as_slice());
    if d > 1e-14 {
        return Err(format!("relative difference {d:e}"));
    }
    Ok(())
}

fn kron_norm(ctx: &mut Ctx, _: usize) -> Check {
    let ms: Vec<Matrix> = (0..3)
        .map(|_| {
            let (r, c) = ctx.dims();
            ctx.matrix(r, c)
        })
        .collect();
    let w = ctx.kron(&ctx.kron(&ms[0], &ms[1]), &ms[2]);
    let fro: f64 = ms.iter().map(Matrix::frobenius_norm).product();
    let e = rel_err(w.frobenius_norm(), fro);
    if e > 1e-12 {
        return Err(format!("frobenius norm relative error {e:e}"));
    }
    let spec = |m: &Matrix| svd(m).map(|s| s.sigma_max()).map_err(|e| e.to_string());
    let mut expected = 1.0;
    for m in &ms {
        expected *= spec(m)?;
    }
    let e = rel_err(spec(&w)?, expected);
    if e > 1e-12 {
        return Err(format!("spectral norm relative error {e:e}"));
    }
    Ok(())
}

fn kron_rank(ctx: &mut Ctx, _: usize) -> Check {
    let (na, nb) = (ctx.rng.random_range(2..=4), ctx.rng.random_range(2..=4));
    let (ra, rb) = (ctx.rng.random_range(1..=na), ctx.rng.random_range(1..=nb));
    let a = ctx.rank_deficient(na, ra);
    let b = ctx.rank_deficient(nb, rb);
    let rank = |m: &Matrix| numeric_rank(m).map_err(|e| e.to_string());
    let (got_a, got_b, got_w) = (rank(&a)?, rank(&b)?, rank(&ctx.kron(&a, &b))?);
    if got_a != ra || got_b != rb {
        return Err(format!("constructed ranks {ra},{rb} measured {got_a},{got_b}"));
    }
    if got_w != ra * rb {
        return Err(format!("rank(A⊗B) = {got_w}, expected {}", ra * rb));
    }
    Ok(())
}

fn kron_condition(ctx: &mut Ctx, _: usize) -> Check {
    let (na, nb) = (ctx.rng.random_range(2..=4), ctx.rng.random_range(2..=4));
    let a = ctx.well_conditioned(na);
    let b = ctx.well_conditioned(nb);
    let k = |m: &Matrix| condition_number(m).map_err(|e| e.to_string());
    let expected = k(&a)? * k(&b)?;
    let got = k(&ctx.kron(&a, &b))?;
    let e = rel_err(got, expected);
    if e > 1e-8 {
        return Err(format!("κ(A⊗B) = {got}, κ(A)κ(B) = {expected}"));
    }
    Ok(())
}

fn random_transform(ctx: &mut Ctx, order: usize, integer: bool) -> SeparableTransform {
    let factors = (0..order)
        .map(|_| {
            let (r, c) = ctx.dims();
            if integer {
                ctx.int_matrix(r, c)
            } else {
                ctx.matrix(r, c)
            }
        })
        .collect();
    SeparableTransform::new(factors, None).expect("non-empty")
}

fn md_vec(ctx: &mut Ctx, trial: usize) -> Check {
    let order = trial % 3 + 1;
    let integer = trial % 2 == 0;
    let t = random_transform(ctx, order, integer);
    let v: Vec<f64> = (0..t.input_len())
        .map(|_| {
            if integer {
                f64::from(ctx.rng.random_range(-9i32..=9))
            } else {
                ctx.rng.random_range(-1.0..1.0)
            }
        })
        .collect();
    let x = Tensor::unvec(&v, &t.input_shape()).map_err(|e| e.to_string())?;
    let md = t.forward_md(&x).map_err(|e| e.to_string())?;
    let vec = t.forward_vec(&v).map_err(|e| e.to_string())?;
    let dense = ctx.materialize(t.factors()).matvec(&v).map_err(|e| e.to_string())?;
    let tol = if integer { 0.0 } else { 1e-12 };
    let d = max_rel_diff(md.vec(), &vec);
    if d > tol {
        return Err(format!("T={order}: forward_vec vs vec(forward_md) differ by {d:e}"));
    }
    let d = max_rel_diff(&vec, &dense);
    if d > tol {
        return Err(format!("T={order}: forward_vec vs W·v differ by {d:e}"));
    }
    Ok(())
}

fn masked(ctx: &mut Ctx, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| {
        if ctx.rng.random_bool(0.5) {
            0.0
        } else {
            let mag = ctx.rng.random_range(0.5..2.0);
            if ctx.rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        }
    })
}

fn sparsity(ctx: &mut Ctx, _: usize) -> Check {
    let (k1, i1) = ctx.dims();
    let (k2, i2) = ctx.dims();
    let a = masked(ctx, k1, i1);
    let b = masked(ctx, k2, i2);
    let w = ctx.kron(&b, &a);
    if w.nnz() != a.nnz() * b.nnz() {
        return Err(format!("nnz(W) = {}, nnz(A)·nnz(B) = {}", w.nnz(), a.nnz() * b.nnz()));
    }
    let (za, zb) = (a.len() - a.nnz(), b.len() - b.nnz());
    let zeros = w.len() - w.nnz();
    let formula = za * (k2 * i2) + zb * (k1 * i1) - za * zb;
    if zeros != formula {
        return Err(format!("zeros(W) = {zeros}, zero-count formula gives {formula}"));
    }
    Ok(())
}

fn fd_check(
    analytic: &[Matrix],
    factors: &[Matrix],
    tol: f64,
    f: impl Fn(&[Matrix]) -> f64,
) -> Check {
    for (t, (a, m)) in analytic.iter().zip(factors).enumerate() {
        let mut numeric = Matrix::zeros(m.rows(), m.cols());
        for idx in 0..m.len() {
            let x = m.as_slice()[idx];
            let h = 1e-6 * x.abs().max(1.0);
            let mut fp = factors.to_vec();
            fp[t].as_mut_slice()[idx] = x + h;
            let mut fm = factors.to_vec();
            fm[t].as_mut_slice()[idx] = x - h;
            numeric.as_mut_slice()[idx] = (f(&fp) - f(&fm)) / (2.0 * h);
        }
        let scale = a.max_abs().max(numeric.max_abs()).max(1e-12);
        for (idx, (x, y)) in a.as_slice().iter().zip(numeric.as_slice()).enumerate() {
            if (x - y).abs() > tol * scale {
                return Err(format!("factor {t} entry {idx}: analytic {x} vs numeric {y}"));
            }
        }
    }
    Ok(())
}

fn random_factor_list(ctx: &mut Ctx, min_dim: usize) -> Vec<Matrix> {
    let n = ctx.rng.random_range(1..=3);
    (0..n)
        .map(|_| {
            let r = ctx.rng.random_range(min_dim..=4);
            let c = ctx.rng.random_range(min_dim..=4);
            ctx.matrix(r, c)
        })
        .collect()
}

fn grad_rho(ctx: &mut Ctx, _: usize) -> Check {
    let f = random_factor_list(ctx, 1);
    fd_check(&rho_grad(&f), &f, 1e-5, rho_value)
}

fn grad_tau(ctx: &mut Ctx, _: usize) -> Check {
    let f: Vec<Matrix> = random_factor_list(ctx, 2);
    let nu = 10f64.powf(ctx.rng.random_range(-4.0..-1.0));
    let g = tau_grad(&f, nu).map_err(|e| e.to_string())?;
    fd_check(&g, &f, 1e-5, |m| tau_value(m, nu).expect("tau defined"))
}

fn grad_sparsity(ctx: &mut Ctx, _: usize) -> Check {
    let f = random_factor_list(ctx, 1);
    let p = ctx.rng.random_range(0.3..=1.0);
    let varpi = 1e-2;
    let g = g_grad_all(&f, p, varpi).map_err(|e| e.to_string())?;
    fd_check(&g, &f, 1e-5, |m| g_value_all(m, p, varpi).expect("valid"))
}

fn random_model(ctx: &mut Ctx) -> Result<SepMlp> {
    let order = ctx.rng.random_range(1..=3);
    let first: Vec<[usize; 2]> = (0..order)
        .map(|_| [ctx.rng.random_range(1..=3), ctx.rng.random_range(1..=3)])
        .collect();
    let second: Vec<[usize; 2]> = first
        .iter()
        .map(|&[k, _]| [ctx.rng.random_range(1..=3), k])
        .collect();
    let classes = second.iter().map(|f| f[0]).product();
    let seed = ctx.rng.random();
    let mut m = SepMlp::random(
        &[
            LayerSpec {
                factors: first,
                activation: Activation::Relu,
                bias: true,
            },
            LayerSpec {
                factors: second,
                activation: Activation::Identity,
                bias: true,
            },
        ],
        classes,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    for v in m.param_slices_mut().into_iter().flatten() {
        *v = ctx.rng.random_range(-1.0..1.0);
    }
    Ok(m)
}

fn fd_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-6)
}

fn grad_backprop(ctx: &mut Ctx, _: usize) -> Check {
    let m = random_model(ctx).map_err(|e| e.to_string())?;
    let n: usize = m.input_shape().iter().product();
    let x = Tensor::new(m.input_shape(), (0..n).map(|_| ctx.rng.random_range(-1.0..1.0)).collect())
        .map_err(|e| e.to_string())?;
    let label = ctx.rng.random_range(0..m.classes());
    let (_, cache) = m.forward(&x).map_err(|e| e.to_string())?;
    let (grads, input) = m.backward_full(&cache, label).map_err(|e| e.to_string())?;
    let loss = |m: &SepMlp, x: &Tensor| m.loss(x, label).expect("valid model");
    let h = 1e-6;
    for (s, gs) in grads.slices().iter().enumerate() {
        for (i, &analytic) in gs.iter().enumerate() {
            let mut mp = m.clone();
            mp.param_slices_mut()[s][i] += h;
            let mut mm = m.clone();
            mm.param_slices_mut()[s][i] -= h;
            let numeric = (loss(&mp, &x) - loss(&mm, &x)) / (2.0 * h);
            if !fd_close(analytic, numeric) {
                return Err(format!("parameter {s}/{i}: analytic {analytic} vs numeric {numeric}"));
            }
        }
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.vec_mut()[i] += h;
        let mut xm = x.clone();
        xm.vec_mut()[i] -= h;
        let numeric = (loss(&m, &xp) - loss(&m, &xm)) / (2.0 * h);
        if !fd_close(input.vec()[i], numeric) {
            return Err(format!("input {i}: analytic {} vs numeric {numeric}", input.vec()[i]));
        }
    }
    Ok(())
}

fn condition_scale(ctx: &mut Ctx, _: usize) -> Check {
    let n = ctx.rng.random_range(2..=4);
    let a = ctx.well_conditioned(n);
    let c = ctx.rng.random_range(0.1..100.0) * if ctx.rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let k1 = condition_number(&a).map_err(|e| e.to_string())?;
    let k2 = condition_number(&a.scale(c)).map_err(|e| e.to_string())?;
    if rel_err(k1, k2) > 1e-12 {
        return Err(format!("κ(A) = {k1}, κ(cA) = {k2}"));
    }
    Ok(())
}

fn svd_reconstruction(ctx: &mut Ctx, _: usize) -> Check {
    let (r, c) = (ctx.rng.random_range(1..=6), ctx.rng.random_range(1..=6));
    let a = ctx.matrix(r, c);
    let s = svd(&a).map_err(|e| e.to_string())?;
    let d = max_rel_diff(s.reconstruct().as_slice(), a.as_slice());
    if d > 1e-10 {
        return Err(format!("reconstruction error {d:e}"));
    }
    for (name, q) in [("U", &s.u), ("V", &s.v)] {
        let g = q.transpose().matmul(q).map_err(|e| e.to_string())?;
        let id = Matrix::identity(g.rows());
        let e = g
            .as_slice()
            .iter()
            .zip(id.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if e > 1e-10 {
            return Err(format!("{name}ᵀ{name} deviates from I by {e:e}"));
        }
    }
    if s.singular_values.windows(2).any(|w| w[0] < w[1]) {
        return Err("singular values not sorted".into());
    }
    Ok(())
}

type Property = (&'static str, fn(&mut Ctx, usize) -> Check, bool);

const PROPERTIES: &[Property] = &[
    ("kron_associativity", kron_associativity, false),
    ("kron_norm_multiplicativity", kron_norm, false),
    ("kron_rank_multiplicativity", kron_rank, false),
    ("kron_condition_multiplicativity", kron_condition, false),
    ("md_vec_equivalence", md_vec, false),
    ("sparsity_counting", sparsity, false),
    ("condition_scale_invariance", condition_scale, false),
    ("svd_reconstruction", svd_reconstruction, false),
    ("gradient_rho", grad_rho, true),
    ("gradient_tau", grad_tau, true),
    ("gradient_sparsity", grad_sparsity, true),
    ("gradient_backprop", grad_backprop, true),
];

pub fn property_names() -> Vec<&'static str> {
    PROPERTIES.iter().map(|p| p.0).collect()
}

/// Runs every property. Finite-difference properties use `max(trials / 5, 20)`
/// cases since each one costs a full sweep over the parameters.
pub fn run(opts: &VerifyOptions) -> Vec<PropertyResult> {
    PROPERTIES
        .iter()
        .enumerate()
        .map(|(i, &(name, f, expensive))| {
            let mut ctx = Ctx {
                rng: ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64)),
                fault: opts.fault,
            };
            let trials = if expensive {
                (opts.trials / 5).max(20)
            } else {
                opts.trials
            };
            PropertyResult {
                name,
                trials,
                failure: run_property(&mut ctx, trials, f),
            }
        })
        .collect()
}
