//! FGSM and PGD under an ℓ∞ budget with input-range clipping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::SepMlp;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    /// PGD only.
    pub steps: usize,
    /// PGD only.
    pub step_size: f64,
    pub lo: f64,
    pub hi: f64,
    /// Seed for a uniform start inside the ball; `None` starts from the clean input.
    pub random_start: Option<u64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::pgd_default()
    }
}

impl AttackConfig {
    pub const PGD_EPSILON: f64 = 0.031;
    pub const PGD_STEPS: usize = 10;
    pub const PGD_STEP_SIZE: f64 = 0.0078;
    pub const FGSM_EPSILON: f64 = 0.015;

    pub fn pgd_default() -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon: Self::PGD_EPSILON,
            steps: Self::PGD_STEPS,
            step_size: Self::PGD_STEP_SIZE,
            lo: 0.0,
            hi: 1.0,
            random_start: None,
        }
    }

    pub fn fgsm_default() -> Self {
        Self::fgsm(Self::FGSM_EPSILON)
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            ..Self::pgd_default()
        }
    }

    pub fn pgd(epsilon: f64, steps: usize, step_size: f64) -> Self {
        Self {
            epsilon,
            steps,
            step_size,
            ..Self::pgd_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::param(
                "lo/hi",
                format!("need finite lo < hi, got [{}, {}]", self.lo, self.hi),
            ));
        }
        if !(self.epsilon >= 0.0) || self.epsilon > self.hi - self.lo {
            return Err(Error::param(
                "epsilon",
                format!("must lie in [0, hi - lo], got {}", self.epsilon),
            ));
        }
        if self.kind == AttackKind::Pgd {
            if self.steps == 0 {
                return Err(Error::param("steps", "must be at least 1"));
            }
            if !(self.step_size > 0.0) || !self.step_size.is_finite() {
                return Err(Error::param(
                    "step_size",
                    format!("must be positive, got {}", self.step_size),
                ));
            }
        }
        Ok(())
    }

    /// PGD cannot reach the ball boundary when `steps * step_size < epsilon`.
    pub fn budget_unreachable(&self) -> bool {
        self.kind == AttackKind::Pgd && (self.steps as f64) * self.step_size < self.epsilon
    }

    pub fn is_noop(&self) -> bool {
        self.epsilon == 0.0
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the cross-entropy loss with respect to `x`.
pub fn input_gradient(model: &SepMlp, x: &Tensor, label: usize) -> Result<Tensor> {
    let (_, cache) = model.forward(x)?;
    model.input_gradient(&cache, label)
}

fn check_range(x: &Tensor, cfg: &AttackConfig) -> Result<()> {
    match x.vec().iter().find(|v| !(cfg.lo..=cfg.hi).contains(*v)) {
        Some(&value) => Err(Error::InputOutOfRange {
            value,
            lo: cfg.lo,
            hi: cfg.hi,
        }),
        None => Ok(()),
    }
}

/// One signed step from `x`, projected onto the ball around `x0` intersected with `[lo, hi]`.
fn projected_step(x: &mut Tensor, x0: &Tensor, grad: &Tensor, step: f64, cfg: &AttackConfig) {
    for ((v, &c), &g) in x.vec_mut().iter_mut().zip(x0.vec()).zip(grad.vec()) {
        let lower = cfg.lo.max(c - cfg.epsilon);
        let upper = cfg.hi.min(c + cfg.epsilon);
        *v = (*v + step * sign(g)).clamp(lower, upper);
    }
}

pub fn fgsm(model: &SepMlp, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_range(x, cfg)?;
    let grad = input_gradient(model, x, label)?;
    let mut adv = x.clone();
    if cfg.epsilon > 0.0 {
        projected_step(&mut adv, x, &grad, cfg.epsilon, cfg);
    }
    Ok(adv)
}

pub fn pgd(model: &SepMlp, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_range(x, cfg)?;
    let mut adv = x.clone();
    if cfg.epsilon == 0.0 {
        // still surface shape and label errors
        input_gradient(model, x, label)?;
        return Ok(adv);
    }
    if let Some(seed) = cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (v, &c) in adv.vec_mut().iter_mut().zip(x.vec()) {
            let lower = cfg.lo.max(c - cfg.epsilon);
            let upper = cfg.hi.min(c + cfg.epsilon);
            *v = (c + rng.random_range(-cfg.epsilon..=cfg.epsilon)).clamp(lower, upper);
        }
    }
    for _ in 0..cfg.steps {
        let grad = input_gradient(model, &adv, label)?;
        projected_step(&mut adv, x, &grad, cfg.step_size, cfg);
    }
    Ok(adv)
}

/// Dispatches on `cfg.kind`.
pub fn attack(model: &SepMlp, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<Tensor> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(model, x, label, cfg),
        AttackKind::Pgd => pgd(model, x, label, cfg),
    }
}

pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.vec()
        .iter()
        .zip(b.vec())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
