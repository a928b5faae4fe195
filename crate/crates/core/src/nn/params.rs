use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub value: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn l2_norm(&self) -> f64 {
        self.value.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }
}

/// Glorot-uniform bound for a weight tensor of the given shape. The first
/// two axes are channel axes, the rest form the receptive field.
pub fn glorot_limit(shape: &[usize]) -> f64 {
    let receptive: usize = shape.iter().skip(2).product();
    let fan_a = shape.first().copied().unwrap_or(1) * receptive;
    let fan_b = shape.get(1).copied().unwrap_or(1) * receptive;
    (6.0 / (fan_a + fan_b) as f64).sqrt()
}

/// Ordered, named parameter tensors of one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    /// Adds a Glorot-uniform weight tensor scaled by `gain`.
    pub fn push_weight<R: Rng + ?Sized>(&mut self, name: &str, shape: Vec<usize>, rng: &mut R, gain: f64) -> usize {
        let limit = glorot_limit(&shape) * gain;
        let len = shape.iter().product();
        let value = (0..len).map(|_| T::of(rng.random_range(-limit..=limit))).collect();
        self.params.push(Param { name: name.to_string(), shape, kind: ParamKind::Weight, value });
        self.params.len() - 1
    }

    pub fn push_bias(&mut self, name: &str, len: usize) -> usize {
        self.params.push(Param { name: name.to_string(), shape: vec![len], kind: ParamKind::Bias, value: vec![T::zero(); len] });
        self.params.len() - 1
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads { values: self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Rescales every weight tensor whose L2 norm exceeds `max_norm` onto
    /// the ball of that radius; biases are left alone. Returns the number of
    /// tensors rescaled.
    pub fn clip_weight_norms(&mut self, max_norm: f64) -> usize {
        // Tensors within rounding distance of the bound are treated as
        // already projected so that re-clipping is a no-op.
        let threshold = max_norm * (1.0 + 1e-6);
        let mut clipped = 0;
        for p in self.params.iter_mut().filter(|p| p.kind == ParamKind::Weight) {
            let norm = p.l2_norm();
            if norm > threshold {
                let scale = T::of(max_norm / norm);
                p.value.iter_mut().for_each(|v| *v *= scale);
                clipped += 1;
            }
        }
        clipped
    }

    pub fn max_weight_norm(&self) -> f64 {
        self.params.iter().filter(|p| p.kind == ParamKind::Weight).map(|p| p.l2_norm()).fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    kind: p.kind,
                    value: p.value.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Flat copy of every scalar, in parameter order.
    pub fn flatten(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    /// Locates flat scalar `i` as `(param index, offset)`.
    pub fn locate(&self, mut i: usize) -> Option<(usize, usize)> {
        for (pi, p) in self.params.iter().enumerate() {
            if i < p.value.len() {
                return Some((pi, i));
            }
            i -= p.value.len();
        }
        None
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    values: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, idx: usize) -> &[T] {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut [T] {
        &mut self.values[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<T>> {
        self.values.iter()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|g| g.iter().all(|v| *v == T::zero()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 5e-5, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr_t = c.learning_rate * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let (b1, b2, eps, lr_t) = (T::of(c.beta1), T::of(c.beta2), T::of(c.epsilon), T::of(lr_t));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut self.first).zip(&mut self.second) {
            for (((w, &g), m), v) in p.value.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let delta = lr_t * *m / (v.sqrt() + eps);
                *w -= delta;
            }
        }
    }
}
