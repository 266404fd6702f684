//! Minimal differentiable-layer substrate.
//!
//! Layers are stateless with respect to activations: `forward` returns the
//! output together with whatever the backward pass needs, and `backward`
//! consumes that cache, accumulates parameter gradients into [`Param::grad`]
//! and returns the gradient with respect to the layer input.

mod activation;
mod batchnorm;
mod conv;
mod embedding;
mod linear;
mod lstm;
mod pool;

pub use activation::{relu, relu_backward, sigmoid};
pub use batchnorm::{BatchNorm1d, BatchNormCache};
pub use conv::{Conv2d, Conv2dCache};
pub use embedding::Embedding;
pub use linear::Linear;
pub use lstm::{Lstm, LstmState, LstmStepCache};
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d, MaxPoolCache};

use rand::Rng;

use crate::tensor::Tensor;

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self::new(Tensor::from_vec(shape, data).expect("shape product matches"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns named parameters. Names are stable and hierarchical
/// (`encoder.stem.weight`), which is what checkpoints and optimizer state
/// key on.
pub trait Parameterized {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param));
    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param));

    /// Non-trainable state that must survive a checkpoint round trip.
    fn visit_buffers<'a>(&'a self, _prefix: &str, _f: &mut dyn FnMut(String, &'a Tensor)) {}
    fn visit_buffers_mut<'a>(&'a mut self, _prefix: &str, _f: &mut dyn FnMut(String, &'a mut Tensor)) {}

    fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit_buffers("", &mut |name, t| out.push((name, t)));
        out
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_buffers_mut("", &mut |name, t| out.push((name, t)));
        out
    }

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, p| out.push((name, p)));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.visit_params_mut("", &mut |name, p| out.push((name, p)));
        out
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
