//! Learnable parameters and their per-forward graph bindings.

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A named learnable tensor with SGD momentum state.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub momentum: Vec<f64>,
    /// Weight decay applies only to conv/linear weights, not BN scale/shift
    /// or biases.
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, decay: bool) -> Self {
        let momentum = vec![0.0; value.numel()];
        Param {
            name: name.into(),
            value,
            momentum,
            decay,
        }
    }

    /// Zero-mean Gaussian with variance `2/fan_in` (He initialization).
    pub fn he_init<R: Rng>(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| normal.sample(rng)).collect();
        Param::new(name, Tensor::new(shape, data).unwrap(), true)
    }
}

/// Records which graph leaf each parameter was bound to during a forward
/// pass, keyed by parameter name.
#[derive(Default)]
pub struct Bindings {
    entries: Vec<(String, NodeId)>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings::default()
    }

    /// Insert the parameter as a graph leaf and remember the association.
    pub fn bind(&mut self, g: &mut Graph, p: &Param, trainable: bool) -> NodeId {
        let id = g.leaf(p.value.clone(), trainable);
        self.entries.push((p.name.clone(), id));
        id
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.entries.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

/// Training/eval mode switch; controls batch-norm statistics and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization layer: learnable scale/shift plus running statistics.
#[derive(Debug, Clone)]
pub struct BnLayer {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnLayer {
    /// gamma = 1, beta = 0, running stats at (0, 1).
    pub fn new(prefix: &str, channels: usize) -> Self {
        BnLayer::with_gamma(prefix, channels, 1.0)
    }

    /// CMA blocks zero-initialize gamma so the whole block starts as an
    /// identity mapping.
    pub fn with_gamma(prefix: &str, channels: usize, gamma0: f64) -> Self {
        BnLayer {
            gamma: Param::new(format!("{prefix}.gamma"), Tensor::full(vec![channels], gamma0), false),
            beta: Param::new(format!("{prefix}.beta"), Tensor::zeros(vec![channels]), false),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    /// Train mode uses batch statistics and updates the running state;
    /// a frozen layer must be called with `Mode::Eval`.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        mode: Mode,
        trainable: bool,
        b: &mut Bindings,
    ) -> crate::Result<NodeId> {
        let gamma = b.bind(g, &self.gamma, trainable);
        let beta = b.bind(g, &self.beta, trainable);
        match mode {
            Mode::Train => {
                let (out, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = self.momentum;
                for c in 0..mean.len() {
                    self.running_mean[c] = m * self.running_mean[c] + (1.0 - m) * mean[c];
                    self.running_var[c] = m * self.running_var[c] + (1.0 - m) * var[c];
                }
                Ok(out)
            }
            Mode::Eval => g.batch_norm_eval(x, gamma, beta, self.eps, &self.running_mean, &self.running_var),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
