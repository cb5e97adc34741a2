//! Regularized objective, adversarial min-max training loop, metrics and pruning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{attack, AttackConfig};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::nn::{argmax, cross_entropy, AdamConfig, AdamState, GradientSet, LayerSpec, SepMlp};
use crate::regularizers::{
    g_grad_all, g_value_all, rho_grad, rho_value, tau_grad, tau_value, RegularizerConfig,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub regularizers: RegularizerConfig,
    /// Present for adversarial training.
    pub attack: Option<AttackConfig>,
    /// Attack used for per-epoch robust accuracy; defaults to `attack`.
    pub eval_attack: Option<AttackConfig>,
    pub adam: AdamConfig,
    pub seed: u64,
    pub prune_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            regularizers: RegularizerConfig::default(),
            attack: None,
            eval_attack: None,
            adam: AdamConfig::default(),
            seed: 0,
            prune_threshold: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if !(self.prune_threshold >= 0.0) {
            return Err(Error::param("prune_threshold", "must be non-negative"));
        }
        self.regularizers.validate()?;
        self.adam.validate()?;
        for a in self.attack.iter().chain(&self.eval_attack) {
            a.validate()?;
            if a.budget_unreachable() {
                log::warn!(
                    "pgd steps * step_size = {} is below epsilon = {}",
                    a.steps as f64 * a.step_size,
                    a.epsilon
                );
            }
        }
        Ok(())
    }

    fn robust_attack(&self) -> Option<&AttackConfig> {
        self.eval_attack.as_ref().or(self.attack.as_ref())
    }
}

/// Components of the objective. Regularizer values are unweighted.
///
/// `tau` is NaN when it is not in use (`mu2 = 0`) and undefined for some factor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub data: f64,
    #[serde(with = "marker")]
    pub rho: f64,
    #[serde(with = "marker")]
    pub tau: f64,
    #[serde(with = "marker")]
    pub g: f64,
}

fn regularizer_parts(model: &SepMlp, reg: &RegularizerConfig) -> Result<(f64, f64, f64)> {
    let factors = model.factors();
    let rho = rho_value(&factors);
    let tau = match tau_value(&factors, reg.nu) {
        Ok(v) => v,
        Err(e) if reg.mu2 > 0.0 => return Err(e),
        Err(_) => f64::NAN,
    };
    let g = g_value_all(&factors, reg.p, reg.varpi)?;
    Ok((rho, tau, g))
}

fn combine(data: f64, (rho, tau, g): (f64, f64, f64), reg: &RegularizerConfig) -> LossParts {
    let mut total = data;
    for (mu, v) in [(reg.mu1, rho), (reg.mu2, tau), (reg.mu3, g)] {
        if mu != 0.0 {
            total += mu * v;
        }
    }
    LossParts {
        total,
        data,
        rho,
        tau,
        g,
    }
}

fn mean_data_loss(model: &SepMlp, inputs: &[(Tensor, usize)]) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (x, y) in inputs {
        sum += model.loss(x, *y)?;
    }
    Ok(sum / inputs.len() as f64)
}

fn clean_inputs(batch: &[Sample]) -> Vec<(Tensor, usize)> {
    batch.iter().map(|s| (s.x.clone(), s.label)).collect()
}

/// Per-sample adversarial inputs under the current parameters.
pub fn adversarial_inputs(
    model: &SepMlp,
    batch: &[Sample],
    cfg: &AttackConfig,
) -> Result<Vec<(Tensor, usize)>> {
    batch
        .iter()
        .map(|s| Ok((attack(model, &s.x, s.label, cfg)?, s.label)))
        .collect()
}

/// Mean clean cross-entropy plus weighted penalties over all factors.
pub fn rlst_loss(model: &SepMlp, batch: &[Sample], reg: &RegularizerConfig) -> Result<LossParts> {
    let data = mean_data_loss(model, &clean_inputs(batch))?;
    Ok(combine(data, regularizer_parts(model, reg)?, reg))
}

/// Like [`rlst_loss`] with the data term on per-sample adversarial inputs.
pub fn arlst_loss(
    model: &SepMlp,
    batch: &[Sample],
    reg: &RegularizerConfig,
    attack_cfg: &AttackConfig,
) -> Result<LossParts> {
    let data = mean_data_loss(model, &adversarial_inputs(model, batch, attack_cfg)?)?;
    Ok(combine(data, regularizer_parts(model, reg)?, reg))
}

/// Mean cross-entropy gradient over `inputs`, summed in input order.
pub fn data_gradient(model: &SepMlp, inputs: &[(Tensor, usize)]) -> Result<(f64, GradientSet)> {
    let mut total = GradientSet::zeros_like(model);
    let mut loss = 0.0;
    if inputs.is_empty() {
        return Ok((0.0, total));
    }
    let w = 1.0 / inputs.len() as f64;
    for (x, y) in inputs {
        let (logits, cache) = model.forward(x)?;
        loss += cross_entropy(&logits, *y)?;
        total.add_scaled(w, &model.backward(&cache, *y)?);
    }
    Ok((loss * w, total))
}

/// Unweighted `(∇ρ, ∇τ, ∇g)` over all factors. `∇τ` is skipped (empty) when `mu2 = 0`.
pub fn regularizer_gradients(
    model: &SepMlp,
    reg: &RegularizerConfig,
) -> Result<(Vec<crate::Matrix>, Vec<crate::Matrix>, Vec<crate::Matrix>)> {
    let factors = model.factors();
    let rho = rho_grad(&factors);
    let tau = if reg.mu2 != 0.0 {
        tau_grad(&factors, reg.nu)?
    } else {
        Vec::new()
    };
    let g = g_grad_all(&factors, reg.p, reg.varpi)?;
    Ok((rho, tau, g))
}

/// Objective value and its full gradient on one minibatch.
pub fn objective_gradient(
    model: &SepMlp,
    batch: &[Sample],
    reg: &RegularizerConfig,
    attack_cfg: Option<&AttackConfig>,
) -> Result<(LossParts, GradientSet)> {
    let inputs = match attack_cfg {
        Some(cfg) => adversarial_inputs(model, batch, cfg)?,
        None => clean_inputs(batch),
    };
    let (data, mut grads) = data_gradient(model, &inputs)?;
    let (drho, dtau, dg) = regularizer_gradients(model, reg)?;
    if reg.mu1 != 0.0 {
        grads.add_to_factors(reg.mu1, &drho);
    }
    if reg.mu2 != 0.0 {
        grads.add_to_factors(reg.mu2, &dtau);
    }
    if reg.mu3 != 0.0 {
        grads.add_to_factors(reg.mu3, &dg);
    }
    Ok((combine(data, regularizer_parts(model, reg)?, reg), grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossParts,
    pub natural_accuracy: f64,
    pub robust_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub natural_accuracy: Option<f64>,
    pub robust_accuracy: Option<f64>,
    #[serde(with = "marker")]
    pub structural_cr: f64,
    #[serde(with = "marker")]
    pub pruned_cr: f64,
    pub pruned_entries: usize,
    #[serde(with = "marker_vec")]
    pub layer_condition: Vec<f64>,
}

/// Accuracy in percent on clean inputs, or on per-sample attacked inputs.
///
/// Samples are split across threads; correct counts are summed, so the result
/// does not depend on scheduling.
pub fn evaluate(model: &SepMlp, dataset: &Dataset, attack_cfg: Option<&AttackConfig>) -> Result<f64> {
    let samples = dataset.samples();
    if samples.is_empty() {
        return Ok(0.0);
    }
    let correct_in = |chunk: &[Sample]| -> Result<usize> {
        let mut correct = 0;
        for s in chunk {
            let x = match attack_cfg {
                Some(cfg) => attack(model, &s.x, s.label, cfg)?,
                None => s.x.clone(),
            };
            if argmax(&model.logits(&x)?) == s.label {
                correct += 1;
            }
        }
        Ok(correct)
    };
    let work = samples.len() * attack_cfg.map_or(1, |c| c.steps.max(1) + 1);
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let correct = if work < 2048 || threads == 1 {
        correct_in(samples)?
    } else {
        let chunk = samples.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|c| scope.spawn(move || correct_in(c)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation thread panicked"))
                .sum::<Result<usize>>()
        })?
    };
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

/// Runs `cfg.epochs` epochs of seeded shuffling, minibatch gradients and Adam.
pub fn train(mut model: SepMlp, dataset: &Dataset, cfg: &TrainConfig) -> Result<(SepMlp, TrainReport)> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.epochs > 0 {
        if dataset.is_empty() {
            return Err(Error::param("dataset", "is empty"));
        }
        if dataset.shape() != model.input_shape().as_slice() {
            return Err(Error::ShapeMismatch {
                expected: model.input_shape(),
                actual: dataset.shape().to_vec(),
            });
        }
        if dataset.classes() > model.classes() {
            return Err(Error::LabelOutOfRange {
                label: dataset.classes() - 1,
                classes: model.classes(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = idx.iter().map(|&i| dataset.samples()[i].clone()).collect();
            let (parts, grads) =
                objective_gradient(&model, &batch, &cfg.regularizers, cfg.attack.as_ref())?;
            adam.step(&mut model, &grads)?;
            sums.total += parts.total;
            sums.data += parts.data;
            sums.rho += parts.rho;
            sums.tau += parts.tau;
            sums.g += parts.g;
            batches += 1;
        }
        let n = batches as f64;
        let loss = LossParts {
            total: sums.total / n,
            data: sums.data / n,
            rho: sums.rho / n,
            tau: sums.tau / n,
            g: sums.g / n,
        };
        let natural_accuracy = evaluate(&model, dataset, None)?;
        let robust_accuracy = cfg
            .robust_attack()
            .map(|a| evaluate(&model, dataset, Some(a)))
            .transpose()?;
        log::info!(
            "epoch {} loss {:.6} data {:.6} NA {:.2}{}",
            epoch + 1,
            loss.total,
            loss.data,
            natural_accuracy,
            robust_accuracy.map_or(String::new(), |r| format!(" RA {r:.2}"))
        );
        report.epochs.push(EpochStats {
            epoch: epoch + 1,
            loss,
            natural_accuracy,
            robust_accuracy,
        });
    }
    report.structural_cr = structural_cr(&model);
    if cfg.prune_threshold > 0.0 {
        let pruned = prune(&mut model, cfg.prune_threshold)?;
        report.pruned_entries = pruned.zeroed;
        report.pruned_cr = pruned.cr;
    } else {
        report.pruned_cr = pruned_cr(&model);
    }
    report.natural_accuracy = report.epochs.last().map(|e| e.natural_accuracy);
    report.robust_accuracy = report.epochs.last().and_then(|e| e.robust_accuracy);
    if cfg.prune_threshold > 0.0 && cfg.epochs > 0 {
        report.natural_accuracy = Some(evaluate(&model, dataset, None)?);
        report.robust_accuracy = cfg
            .robust_attack()
            .map(|a| evaluate(&model, dataset, Some(a)))
            .transpose()?;
    }
    report.layer_condition = condition_report(&model);
    Ok((model, report))
}

fn dense_params(model: &SepMlp) -> usize {
    model.layers().iter().map(|l| l.transform.param_count().dense).sum()
}

/// Dense-equivalent parameters over separable parameters, biases counted in both.
pub fn structural_cr(model: &SepMlp) -> f64 {
    let separable: usize = model.layers().iter().map(|l| l.transform.param_count().separable).sum();
    dense_params(model) as f64 / separable as f64
}

/// Dense-equivalent parameters over nonzero factor entries plus bias length.
/// Infinite when every factor entry is zero.
pub fn pruned_cr(model: &SepMlp) -> f64 {
    let nnz: usize = model.factors().iter().map(|f| f.nnz()).sum();
    if nnz == 0 {
        return f64::INFINITY;
    }
    let bias: usize = model
        .layers()
        .iter()
        .map(|l| l.transform.bias().map_or(0, <[f64]>::len))
        .sum();
    dense_params(model) as f64 / (nnz + bias) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneReport {
    /// Nonzero entries set to zero by this call.
    pub zeroed: usize,
    /// Zero factor entries after pruning.
    pub zeros: usize,
    pub cr: f64,
}

/// Sets factor entries with `|a| < threshold` to exactly zero.
pub fn prune(model: &mut SepMlp, threshold: f64) -> Result<PruneReport> {
    if !(threshold >= 0.0) {
        return Err(Error::param("threshold", format!("must be non-negative, got {threshold}")));
    }
    let mut zeroed = 0;
    let mut zeros = 0;
    if threshold > 0.0 {
        for layer in model.layers_mut() {
            for f in layer.transform.factors_mut() {
                for v in f.as_mut_slice() {
                    if *v != 0.0 && v.abs() < threshold {
                        *v = 0.0;
                        zeroed += 1;
                    }
                }
            }
        }
    }
    for f in model.factors() {
        zeros += f.len() - f.nnz();
    }
    Ok(PruneReport {
        zeroed,
        zeros,
        cr: pruned_cr(model),
    })
}

/// Per-layer κ as the product of factor condition numbers; infinite for a
/// rank-deficient factor.
pub fn condition_report(model: &SepMlp) -> Vec<f64> {
    model
        .layers()
        .iter()
        .map(|l| l.transform.condition_number().unwrap_or(f64::INFINITY))
        .collect()
}

pub fn population_variance(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub model: SepMlp,
    pub report: TrainReport,
}

#[derive(Debug, Clone)]
pub struct MultiSeedReport {
    pub runs: Vec<SeedRun>,
    pub natural_variance: Option<f64>,
    pub robust_variance: Option<f64>,
}

/// One independently initialized and trained model per seed, on worker threads.
/// The seed drives both initialization and shuffling.
pub fn train_seeds(
    specs: &[LayerSpec],
    classes: usize,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<MultiSeedReport> {
    let runs: Vec<SeedRun> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                scope.spawn(move || -> Result<SeedRun> {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let model = SepMlp::random(specs, classes, &mut rng)?;
                    let cfg = TrainConfig {
                        seed,
                        ..cfg.clone()
                    };
                    let (model, report) = train(model, dataset, &cfg)?;
                    Ok(SeedRun {
                        seed,
                        model,
                        report,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let (natural_variance, robust_variance) = if runs.len() > 1 {
        let na: Vec<f64> = runs.iter().filter_map(|r| r.report.natural_accuracy).collect();
        let ra: Vec<f64> = runs.iter().filter_map(|r| r.report.robust_accuracy).collect();
        (population_variance(&na), population_variance(&ra))
    } else {
        (None, None)
    };
    Ok(MultiSeedReport {
        runs,
        natural_variance,
        robust_variance,
    })
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"` and `"nan"`.
pub(crate) mod marker {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub(crate) enum Repr {
        Num(f64),
        Text(String),
    }

    pub(crate) fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    pub(crate) fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("invalid float marker `{other}`"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }
}

pub(crate) mod marker_vec {
    use super::marker::{from_repr, to_repr, Repr};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&x| to_repr(x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_gaussians;
    use crate::nn::{Activation, Layer};
    use crate::septrans::SeparableTransform;
    use crate::tensor::Matrix;
    use rand::Rng;

    fn specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec {
                factors: vec![[4, 4], [3, 4]],
                activation: Activation::Relu,
                bias: true,
            },
            LayerSpec {
                factors: vec![[2, 4], [2, 3]],
                activation: Activation::Identity,
                bias: true,
            },
        ]
    }

    // four logits so every factor has at least two rows; data uses two classes
    fn model(seed: u64) -> SepMlp {
        SepMlp::random(&specs(), 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn data(n_per_class: usize, seed: u64) -> Dataset {
        synthetic_gaussians(2, n_per_class, &[4, 4], 1.0, seed).unwrap()
    }

    fn reg(mu1: f64, mu2: f64, mu3: f64) -> RegularizerConfig {
        RegularizerConfig {
            mu1,
            mu2,
            mu3,
            ..RegularizerConfig::default()
        }
    }

    #[test]
    fn unregularized_loss_is_mean_cross_entropy() {
        let m = model(1);
        let ds = data(8, 2);
        let parts = rlst_loss(&m, ds.samples(), &reg(0.0, 0.0, 0.0)).unwrap();
        let mean: f64 = ds
            .samples()
            .iter()
            .map(|s| m.loss(&s.x, s.label).unwrap())
            .sum::<f64>()
            / ds.len() as f64;
        assert_eq!(parts.total, parts.data);
        assert!((parts.data - mean).abs() < 1e-12);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let m = model(3);
        let ds = data(8, 4);
        let r = reg(0.3, 0.7, 0.05);
        let parts = rlst_loss(&m, ds.samples(), &r).unwrap();
        let f = m.factors();
        let expected = parts.data
            + 0.3 * rho_value(&f)
            + 0.7 * tau_value(&f, r.nu).unwrap()
            + 0.05 * g_value_all(&f, r.p, r.varpi).unwrap();
        assert!((parts.total - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_model_sparsity_floor() {
        let layer = Layer {
            transform: SeparableTransform::new(vec![Matrix::zeros(2, 3), Matrix::zeros(1, 2)], None)
                .unwrap(),
            activation: Activation::Identity,
        };
        let m = SepMlp::new(vec![layer], 2).unwrap();
        let r = reg(0.0, 0.0, 0.5);
        let sample = Sample {
            x: Tensor::zeros(&[3, 2]).unwrap(),
            label: 0,
        };
        let parts = rlst_loss(&m, &[sample], &r).unwrap();
        let floor = g_value_all(&[Matrix::zeros(2, 3), Matrix::zeros(1, 2)], r.p, r.varpi).unwrap();
        assert_eq!(parts.g, floor);
        assert!((parts.total - (2f64.ln() + 0.5 * floor)).abs() < 1e-12);
        // one factor has a single row, so tau is undefined but unused
        assert!(parts.tau.is_nan());
        assert!(rlst_loss(&m, &[], &reg(0.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn arlst_with_zero_epsilon_matches_rlst() {
        let m = model(5);
        let ds = data(8, 6);
        let r = reg(0.1, 0.1, 0.1);
        let a = arlst_loss(&m, ds.samples(), &r, &AttackConfig::pgd(0.0, 10, 0.01)).unwrap();
        assert_eq!(a, rlst_loss(&m, ds.samples(), &r).unwrap());
    }

    #[test]
    fn arlst_on_constant_model_matches_clean() {
        let layer = Layer {
            transform: SeparableTransform::new(vec![Matrix::zeros(2, 4), Matrix::zeros(1, 4)], Some(vec![0.4, -0.1]))
                .unwrap(),
            activation: Activation::Identity,
        };
        let m = SepMlp::new(vec![layer], 2).unwrap();
        let ds = data(4, 7);
        let r = reg(0.0, 0.0, 0.0);
        let a = arlst_loss(&m, ds.samples(), &r, &AttackConfig::pgd_default()).unwrap();
        assert_eq!(a.data, rlst_loss(&m, ds.samples(), &r).unwrap().data);
    }

    #[test]
    fn adversarial_data_term_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds = data(100, 9);
        let r = reg(0.0, 0.0, 0.0);
        let mut wins = 0;
        for trial in 0..50 {
            let m = model(100 + trial);
            let batch: Vec<Sample> = (0..8)
                .map(|_| ds.samples()[rng.random_range(0..ds.len())].clone())
                .collect();
            let adv = arlst_loss(&m, &batch, &r, &AttackConfig::pgd_default()).unwrap();
            let clean = rlst_loss(&m, &batch, &r).unwrap();
            if adv.data >= clean.data {
                wins += 1;
            }
        }
        assert!(wins >= 45, "{wins}/50");
    }

    #[test]
    fn gradient_is_additive() {
        let m = model(10);
        let ds = data(6, 11);
        let r = reg(0.2, 0.3, 0.4);
        let (_, total) = objective_gradient(&m, ds.samples(), &r, None).unwrap();
        let inputs: Vec<_> = ds.samples().iter().map(|s| (s.x.clone(), s.label)).collect();
        let (_, mut expected) = data_gradient(&m, &inputs).unwrap();
        let f = m.factors();
        expected.add_to_factors(0.2, &rho_grad(&f));
        expected.add_to_factors(0.3, &tau_grad(&f, r.nu).unwrap());
        expected.add_to_factors(0.4, &g_grad_all(&f, r.p, r.varpi).unwrap());
        for (a, b) in total.slices().iter().zip(expected.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let m = model(12);
        let ds = data(3, 13);
        let r = reg(0.5, 0.2, 0.1);
        let (_, g) = objective_gradient(&m, ds.samples(), &r, None).unwrap();
        let slices: Vec<Vec<f64>> = g.slices().iter().map(|s| s.to_vec()).collect();
        for (si, s) in slices.iter().enumerate() {
            for (i, &analytic) in s.iter().enumerate() {
                let h = 1e-6;
                let eval = |d: f64| {
                    let mut p = m.clone();
                    p.param_slices_mut()[si][i] += d;
                    rlst_loss(&p, ds.samples(), &r).unwrap().total
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!((analytic - numeric).abs() <= 1e-4 * scale, "{si}/{i}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn zero_epochs_returns_model_unchanged() {
        let m = model(14);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, report) = train(m.clone(), &data(5, 15), &cfg).unwrap();
        assert_eq!(out.layers(), m.layers());
        assert!(report.epochs.is_empty());
        assert_eq!(report.natural_accuracy, None);
    }

    #[test]
    fn training_reaches_high_accuracy_and_is_deterministic() {
        let ds = data(100, 16);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 20,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            seed: 3,
            ..TrainConfig::default()
        };
        let (a, report) = train(model(17), &ds, &cfg).unwrap();
        let (b, _) = train(model(17), &ds, &cfg).unwrap();
        assert_eq!(a.layers(), b.layers());
        assert_eq!(report.epochs.len(), 50);
        assert!(report.natural_accuracy.unwrap() >= 95.0, "{:?}", report.natural_accuracy);
    }

    #[test]
    fn arlst_with_zero_epsilon_has_rlst_trajectory() {
        let ds = data(20, 18);
        let base = TrainConfig {
            epochs: 3,
            batch_size: 8,
            regularizers: reg(0.01, 0.0, 0.01),
            seed: 4,
            ..TrainConfig::default()
        };
        let adv = TrainConfig {
            attack: Some(AttackConfig::pgd(0.0, 10, 0.0078)),
            ..base.clone()
        };
        let (a, _) = train(model(19), &ds, &base).unwrap();
        let (b, _) = train(model(19), &ds, &adv).unwrap();
        assert_eq!(a.layers(), b.layers());
    }

    #[test]
    fn evaluate_cases() {
        // logits = bias only; the single class-1 bias wins
        let layer = Layer {
            transform: SeparableTransform::new(vec![Matrix::zeros(2, 16)], Some(vec![0.0, 1.0])).unwrap(),
            activation: Activation::Identity,
        };
        let m = SepMlp::new(vec![layer], 2).unwrap();
        let ds = data(10, 20).reshape(&[16]).unwrap();
        assert_eq!(evaluate(&m, &ds, None).unwrap(), 50.0);
        let trained = model(21);
        let ds = data(50, 22);
        let na = evaluate(&trained, &ds, None).unwrap();
        assert_eq!(evaluate(&trained, &ds, Some(&AttackConfig::fgsm(0.0))).unwrap(), na);
    }

    #[test]
    fn oracle_logits_give_full_accuracy() {
        // one-hot inputs through the identity reproduce the label as argmax
        let m = SepMlp::new(
            vec![Layer {
                transform: SeparableTransform::identity(&[3]).unwrap(),
                activation: Activation::Identity,
            }],
            3,
        )
        .unwrap();
        let samples = (0..9)
            .map(|i| {
                let mut v = vec![0.0; 3];
                v[i % 3] = 1.0;
                Sample {
                    x: Tensor::new(vec![3], v).unwrap(),
                    label: i % 3,
                }
            })
            .collect();
        let ds = Dataset::new(samples, 3, vec![3]).unwrap();
        assert_eq!(evaluate(&m, &ds, None).unwrap(), 100.0);
    }

    #[test]
    fn random_logits_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let classes = 4;
        let n = 1000;
        let w = Matrix::from_fn(classes, 8, |_, _| rng.random_range(-1.0..1.0));
        let m = SepMlp::new(
            vec![Layer {
                transform: SeparableTransform::new(vec![w], None).unwrap(),
                activation: Activation::Identity,
            }],
            classes,
        )
        .unwrap();
        let samples = (0..n)
            .map(|i| Sample {
                x: Tensor::new(vec![8], (0..8).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
                label: i % classes,
            })
            .collect();
        let ds = Dataset::new(samples, classes, vec![8]).unwrap();
        let na = evaluate(&m, &ds, None).unwrap();
        let p = 1.0 / classes as f64;
        let se = 100.0 * (p * (1.0 - p) / n as f64).sqrt();
        assert!((na - 100.0 * p).abs() <= 3.0 * se, "NA {na}");
    }

    #[test]
    fn prune_cases() {
        let mut m = model(24);
        let before = m.clone();
        let r = prune(&mut m, 0.0).unwrap();
        assert_eq!(m.layers(), before.layers());
        assert_eq!(r.cr, structural_cr(&m));
        let r = prune(&mut m, 1e9).unwrap();
        assert!(r.cr.is_infinite());
        assert_eq!(r.zeros, m.factors().iter().map(Matrix::len).sum::<usize>());
        assert!(prune(&mut m, -1.0).is_err());

        let mut m = model(25);
        let r = prune(&mut m, 0.2).unwrap();
        assert!(r.zeroed > 0);
        assert!(m.factors().iter().flat_map(|f| f.as_slice()).all(|&v| v == 0.0 || v.abs() >= 0.2));
        assert!(r.cr > structural_cr(&m));
    }

    #[test]
    fn condition_report_cases() {
        let m = SepMlp::new(
            vec![Layer {
                transform: SeparableTransform::new(
                    vec![Matrix::diag(&[1.0, 2.0]), Matrix::diag(&[1.0, 3.0])],
                    None,
                )
                .unwrap(),
                activation: Activation::Identity,
            }],
            4,
        )
        .unwrap();
        assert!((condition_report(&m)[0] - 6.0).abs() < 1e-12);
        let id = SepMlp::new(
            vec![Layer {
                transform: SeparableTransform::identity(&[2, 2]).unwrap(),
                activation: Activation::Identity,
            }],
            4,
        )
        .unwrap();
        assert_eq!(condition_report(&id), vec![1.0]);
        let m = model(26);
        for (k, l) in condition_report(&m).iter().zip(m.layers()) {
            let dense = crate::linalg::condition_number(&l.transform.materialize()).unwrap();
            assert!((k - dense).abs() <= 1e-8 * dense);
        }
    }

    #[test]
    fn multi_seed_variance() {
        let ds = data(20, 27);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let out = train_seeds(&specs(), 4, &ds, &cfg, &[1, 2, 3]).unwrap();
        assert_eq!(out.runs.len(), 3);
        let na: Vec<f64> = out.runs.iter().map(|r| r.report.natural_accuracy.unwrap()).collect();
        assert_eq!(out.natural_variance, population_variance(&na));
        let again = train_seeds(&specs(), 4, &ds, &cfg, &[2]).unwrap();
        assert_eq!(again.runs[0].model.layers(), out.runs[1].model.layers());
        assert_eq!(again.natural_variance, None);
        assert_eq!(population_variance(&[1.0, 3.0]), Some(1.0));
    }

    #[test]
    fn report_serializes_markers() {
        let report = TrainReport {
            structural_cr: 2.0,
            pruned_cr: f64::INFINITY,
            layer_condition: vec![1.5, f64::INFINITY],
            ..TrainReport::default()
        };
        let text = serde_json::to_string(&report).unwrap();
        let back: TrainReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }
}
