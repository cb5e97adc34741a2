//! Feed-forward classifier built from separable layers.
//!
//! Backpropagation runs mode by mode through the n-mode product chain of each
//! layer; the dense weight matrix is never formed during training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::septrans::SeparableTransform;
use crate::tensor::{mode_contract, nmode_product, Matrix, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of one layer: factor shapes as `[rows, cols]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub factors: Vec<[usize; 2]>,
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub transform: SeparableTransform,
    pub activation: Activation,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            factors: self
                .transform
                .factors()
                .iter()
                .map(|f| [f.rows(), f.cols()])
                .collect(),
            activation: self.activation,
            bias: self.transform.bias().is_some(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SepMlp {
    layers: Vec<Layer>,
    classes: usize,
    generation: u64,
}

// the generation counter is cache bookkeeping, not model state
impl PartialEq for SepMlp {
    fn eq(&self, other: &Self) -> bool {
        self.classes == other.classes && self.layers == other.layers
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    generation: u64,
    layers: Vec<LayerCache>,
    logits: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Tensor,
    chain: Vec<Tensor>,
    pre_activation: Tensor,
}

impl Cache {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

/// Gradient of one layer, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub factors: Vec<Matrix>,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(model: &SepMlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    factors: l
                        .transform
                        .factors()
                        .iter()
                        .map(|f| Matrix::zeros(f.rows(), f.cols()))
                        .collect(),
                    bias: l.transform.bias().map(|b| vec![0.0; b.len()]),
                })
                .collect(),
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &GradientSet) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }

    /// Adds `c * grads[i]` to the i-th factor, counting factors across layers in order.
    pub fn add_to_factors(&mut self, c: f64, grads: &[Matrix]) {
        let mut it = grads.iter();
        for layer in &mut self.layers {
            for f in &mut layer.factors {
                let g = it.next().expect("one gradient per factor");
                f.axpy(c, g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for s in self.slices_mut() {
            for x in s {
                *x *= c;
            }
        }
    }

    /// Parameter gradients in the same order as [`SepMlp::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.factors.iter().map(Matrix::as_slice));
            if let Some(b) = &l.bias {
                out.push(b.as_slice());
            }
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            for f in &mut l.factors {
                out.push(f.as_mut_slice());
            }
            if let Some(b) = &mut l.bias {
                out.push(b.as_mut_slice());
            }
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// `−log softmax(logits)[label]`, stabilized with log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[label]).max(0.0))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

impl SepMlp {
    pub fn new(layers: Vec<Layer>, classes: usize) -> Result<Self> {
        let last = layers.last().ok_or(Error::EmptyFactors)?;
        if last.transform.output_len() != classes {
            return Err(Error::ShapeMismatch {
                expected: vec![classes],
                actual: last.transform.output_shape(),
            });
        }
        for pair in layers.windows(2) {
            let out = pair[0].transform.output_shape();
            let next = pair[1].transform.input_shape();
            if out != next {
                return Err(Error::ShapeMismatch {
                    expected: next,
                    actual: out,
                });
            }
        }
        Ok(Self {
            layers,
            classes,
            generation: 0,
        })
    }

    /// Random initialization.
    ///
    /// Each factor is drawn uniform in `±√(6 / (rows + cols))` and then all
    /// factors of a layer are rescaled by a common `T`-th root so the entries of
    /// the implied dense matrix have the Glorot variance `2 / (∏I + ∏K)`.
    /// Biases start at zero.
    pub fn random(specs: &[LayerSpec], classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            if spec.factors.is_empty() {
                return Err(Error::EmptyFactors);
            }
            if spec.factors.iter().any(|&[r, c]| r == 0 || c == 0) {
                return Err(Error::InvalidShape(spec.factors.iter().flatten().copied().collect()));
            }
            let t = spec.factors.len() as f64;
            let prod_in: usize = spec.factors.iter().map(|f| f[1]).product();
            let prod_out: usize = spec.factors.iter().map(|f| f[0]).product();
            let target_var = 2.0 / (prod_in + prod_out) as f64;
            let product_var: f64 = spec
                .factors
                .iter()
                .map(|&[r, c]| 2.0 / (r + c) as f64)
                .product();
            let rescale = (target_var / product_var).powf(1.0 / (2.0 * t));
            let factors = spec
                .factors
                .iter()
                .map(|&[r, c]| {
                    let limit = (6.0 / (r + c) as f64).sqrt();
                    Matrix::from_fn(r, c, |_, _| rescale * rng.random_range(-limit..limit))
                })
                .collect();
            let bias = spec.bias.then(|| vec![0.0; prod_out]);
            layers.push(Layer {
                transform: SeparableTransform::new(factors, bias)?,
                activation: spec.activation,
            });
        }
        Self::new(layers, classes)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.layers[0].transform.input_shape()
    }

    /// All factor matrices across layers, in layer order.
    pub fn factors(&self) -> Vec<Matrix> {
        self.layers
            .iter()
            .flat_map(|l| l.transform.factors().iter().cloned())
            .collect()
    }

    pub fn factor_count(&self) -> usize {
        self.layers.iter().map(|l| l.transform.order()).sum()
    }

    /// Parameter buffers: per layer, each factor then the bias.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        let mut out = Vec::new();
        for l in &mut self.layers {
            let (factors, bias) = l.transform.params_mut();
            out.extend(factors.iter_mut().map(Matrix::as_mut_slice));
            if let Some(b) = bias {
                out.push(b);
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Vec<f64>, Cache)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let chain = layer.transform.chain(&current)?;
            let mut pre = chain.last().expect("non-empty chain").clone();
            if let Some(b) = layer.transform.bias() {
                for (v, bi) in pre.vec_mut().iter_mut().zip(b) {
                    *v += bi;
                }
            }
            let mut out = pre.clone();
            for v in out.vec_mut() {
                *v = layer.activation.apply(*v);
            }
            caches.push(LayerCache {
                input: std::mem::replace(&mut current, out),
                chain,
                pre_activation: pre,
            });
        }
        let logits = current.into_vec();
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok((
            logits.clone(),
            Cache {
                generation: self.generation,
                layers: caches,
                logits,
            },
        ))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn loss(&self, x: &Tensor, label: usize) -> Result<f64> {
        cross_entropy(&self.logits(x)?, label)
    }

    /// Gradient of the cross-entropy loss with respect to every parameter.
    pub fn backward(&self, cache: &Cache, label: usize) -> Result<GradientSet> {
        let (grads, _) = self.backprop(cache, label, true)?;
        Ok(grads.expect("parameter gradients requested"))
    }

    /// Gradient of the cross-entropy loss with respect to the input tensor.
    pub fn input_gradient(&self, cache: &Cache, label: usize) -> Result<Tensor> {
        Ok(self.backprop(cache, label, false)?.1)
    }

    /// Parameter and input gradients from one backward pass.
    pub fn backward_full(&self, cache: &Cache, label: usize) -> Result<(GradientSet, Tensor)> {
        let (grads, input) = self.backprop(cache, label, true)?;
        Ok((grads.expect("parameter gradients requested"), input))
    }

    fn backprop(
        &self,
        cache: &Cache,
        label: usize,
        with_params: bool,
    ) -> Result<(Option<GradientSet>, Tensor)> {
        if cache.generation != self.generation || cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        if label >= self.classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }
        let mut dlogits = softmax(&cache.logits);
        dlogits[label] -= 1.0;

        let last_shape = cache.layers.last().expect("non-empty").pre_activation.shape();
        let mut upstream = Tensor::unvec(&dlogits, last_shape)?;
        let mut layer_grads = Vec::with_capacity(self.layers.len());

        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            for (g, &pre) in upstream.vec_mut().iter_mut().zip(lc.pre_activation.vec()) {
                *g *= layer.activation.derivative(pre);
            }
            let bias = layer.transform.bias().map(|_| upstream.vec().to_vec());
            let factors = layer.transform.factors();
            let mut factor_grads = vec![None; factors.len()];
            let mut g = upstream;
            for mode in (0..factors.len()).rev() {
                let z_prev = if mode == 0 { &lc.input } else { &lc.chain[mode - 1] };
                if with_params {
                    factor_grads[mode] = Some(mode_contract(&g, z_prev, mode)?);
                }
                g = nmode_product(&g, &factors[mode].transpose(), mode)?;
            }
            if with_params {
                layer_grads.push(LayerGrad {
                    factors: factor_grads.into_iter().map(|f| f.expect("computed")).collect(),
                    bias,
                });
            }
            upstream = g;
        }
        let grads = with_params.then(|| {
            layer_grads.reverse();
            GradientSet {
                layers: layer_grads,
            }
        });
        Ok((grads, upstream))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", format!("must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::param(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::param("eps", "must be positive"));
        }
        Ok(())
    }
}

/// Adam moments for every parameter buffer of one model.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `model` along `-grads`.
    pub fn step(&mut self, model: &mut SepMlp, grads: &GradientSet) -> Result<()> {
        let gs = grads.slices();
        let params = model.param_slices_mut();
        if params.len() != gs.len() || params.iter().zip(&gs).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::ShapeMismatch {
                expected: params.iter().map(|p| p.len()).collect(),
                actual: gs.iter().map(|g| g.len()).collect(),
            });
        }
        if self.first.is_empty() {
            self.first = gs.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != gs.len() {
            return Err(Error::ShapeMismatch {
                expected: self.first.iter().map(Vec::len).collect(),
                actual: gs.iter().map(|g| g.len()).collect(),
            });
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(gs)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
