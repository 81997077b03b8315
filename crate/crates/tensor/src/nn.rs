//! Layers built from graph primitives.

use rand::Rng;

use crate::adam::Param;
use crate::error::TensorError;
use crate::graph::{BatchStats, Graph, Var};
use crate::tensor::Tensor;

pub const BATCHNORM_MOMENTUM: f32 = 0.1;

/// Puts parameters on a graph either as gradient-carrying or frozen
/// leaves, remembering the handles in binding order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Binder {
    trainable: bool,
    vars: Vec<Var>,
}

impl Binder {
    pub fn trainable() -> Self {
        Binder {
            trainable: true,
            vars: Vec::new(),
        }
    }

    pub fn frozen() -> Self {
        Binder {
            trainable: false,
            vars: Vec::new(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn bind<'a>(&mut self, g: &mut Graph<'a>, p: &'a Param) -> Var {
        let v = if self.trainable {
            g.param(&p.value)
        } else {
            g.frozen(&p.value)
        };
        self.vars.push(v);
        v
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Moves the gradients of all bound parameters out of `g`, in binding order.
    pub fn take_grads(&self, g: &mut Graph<'_>) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| g.take_grad(v)).collect()
    }
}

/// Stores gradients returned by [`Binder::take_grads`] on matching parameters.
pub fn assign_grads(params: &mut [&mut Param], grads: Vec<Option<Tensor>>) {
    for (p, g) in params.iter_mut().zip(grads) {
        p.grad = g;
    }
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length from shape")
}

/// `y = x W + b` with `W: [inputs, outputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Uniform initialization in `±1/sqrt(inputs)` for weights and bias.
    pub fn new<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let bound = 1.0 / (inputs.max(1) as f32).sqrt();
        Linear {
            weight: Param::new(uniform(rng, &[inputs, outputs], bound)),
            bias: Param::new(uniform(rng, &[outputs], bound)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        binder: &mut Binder,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w = binder.bind(g, &self.weight);
        let b = binder.bind(g, &self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Batch normalization over the rows of a `[batch, features]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::full(&[features], 1.0)),
            beta: Param::new(Tensor::zeros(&[features])),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward_train<'a>(
        &'a self,
        g: &mut Graph<'a>,
        binder: &mut Binder,
        x: Var,
    ) -> Result<(Var, BatchStats), TensorError> {
        let gamma = binder.bind(g, &self.gamma);
        let beta = binder.bind(g, &self.beta);
        g.batchnorm_train(x, gamma, beta)
    }

    pub fn forward_eval<'a>(
        &'a self,
        g: &mut Graph<'a>,
        binder: &mut Binder,
        x: Var,
    ) -> Result<Var, TensorError> {
        let gamma = binder.bind(g, &self.gamma);
        let beta = binder.bind(g, &self.beta);
        g.batchnorm_eval(x, gamma, beta, &self.running_mean, &self.running_var)
    }

    /// Exponential running averages; the variance uses the unbiased batch estimate.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let correction = if stats.batch > 1 {
            stats.batch as f32 / (stats.batch - 1) as f32
        } else {
            1.0
        };
        for j in 0..self.running_mean.len() {
            self.running_mean[j] = (1.0 - BATCHNORM_MOMENTUM) * self.running_mean[j]
                + BATCHNORM_MOMENTUM * stats.mean[j];
            self.running_var[j] = (1.0 - BATCHNORM_MOMENTUM) * self.running_var[j]
                + BATCHNORM_MOMENTUM * stats.var[j] * correction;
        }
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}
