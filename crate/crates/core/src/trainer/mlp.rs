//! A small fully connected network with manual backprop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Self::Relu => v.max(0.0),
            Self::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `u` and output `a`.
    fn derivative(self, u: f64, a: f64) -> f64 {
        match self {
            Self::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, class count.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, seed: u64) -> Self {
        Self { layer_widths, activation, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 || self.layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "layer_widths needs at least input and output widths, all positive: {:?}",
                self.layer_widths
            )));
        }
        if *self.layer_widths.last().unwrap() < 2 {
            return Err(Error::Config("output width (class count) must be at least 2".into()));
        }
        Ok(())
    }

    /// Checks the first and last widths against a task.
    pub fn check_task(&self, input_dim: usize, num_classes: usize) -> Result<()> {
        self.validate()?;
        let (first, last) = (self.layer_widths[0], *self.layer_widths.last().unwrap());
        if first != input_dim || last != num_classes {
            return Err(Error::Config(format!(
                "network maps {first} -> {last}, task needs {input_dim} -> {num_classes}"
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = vec![0];
        for w in self.layer_widths.windows(2) {
            let last = *offs.last().unwrap();
            offs.push(last + w[0] * w[1] + w[1]);
        }
        offs
    }
}

/// Parameters are stored flat: per layer, the `out x in` weight matrix
/// row-major followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer inputs; `inputs[0]` is the sample.
    inputs: Vec<Vec<f64>>,
    /// Hidden pre-activations.
    pre: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl Mlp {
    /// He-scaled Gaussian weights, zero biases.
    pub fn new(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let offs = spec.layer_offsets();
        let mut params = vec![0.0; *offs.last().unwrap()];
        for (l, w) in spec.layer_widths.windows(2).enumerate() {
            let std = match spec.activation {
                Activation::Relu => (2.0 / w[0] as f64).sqrt(),
                Activation::Tanh => (1.0 / w[0] as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            for p in &mut params[offs[l]..offs[l] + w[0] * w[1]] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(Self { spec: spec.clone(), params })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn num_layers(&self) -> usize {
        self.spec.layer_widths.len() - 1
    }

    pub fn forward(&self, x: &[f64]) -> ForwardCache {
        debug_assert_eq!(x.len(), self.spec.input_dim());
        let offs = self.spec.layer_offsets();
        let widths = &self.spec.layer_widths;
        let mut inputs = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.num_layers() - 1);
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let w = &self.params[offs[l]..offs[l] + n_in * n_out];
            let b = &self.params[offs[l] + n_in * n_out..offs[l + 1]];
            let a = inputs.last().unwrap();
            let u: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    row.iter().zip(a).fold(b[o], |s, (wi, ai)| s + wi * ai)
                })
                .collect();
            if l + 1 == self.num_layers() {
                return ForwardCache { inputs, pre, logits: u };
            }
            inputs.push(u.iter().map(|&v| self.spec.activation.apply(v)).collect());
            pre.push(u);
        }
        unreachable!("at least one layer")
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).logits
    }

    /// Adds `d loss / d params` into `grad`, given `d loss / d logits`.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &[f64], grad: &mut [f64]) {
        let offs = self.spec.layer_offsets();
        let widths = &self.spec.layer_widths;
        let mut delta = d_logits.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let a = &cache.inputs[l];
            let (gw, gb) = grad[offs[l]..offs[l + 1]].split_at_mut(n_in * n_out);
            for o in 0..n_out {
                let d = delta[o];
                gb[o] += d;
                for (g, &ai) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(a) {
                    *g += d * ai;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[offs[l]..offs[l] + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                for (p, &wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wi;
                }
            }
            let u = &cache.pre[l - 1];
            for ((p, &ui), &ai) in prev.iter_mut().zip(u).zip(a) {
                *p *= self.spec.activation.derivative(ui, ai);
            }
            delta = prev;
        }
    }
}

/// SGD with momentum and L2 weight decay (applied to every parameter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, num_params: usize) -> Self {
        Self { lr, momentum, weight_decay, velocity: vec![0.0; num_params] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= self.lr * *v;
        }
    }
}
