//! Hand-written layers with explicit forward/backward passes.
//!
//! Every layer caches what its backward pass needs during a training-mode
//! forward call; `backward` consumes that cache, accumulates parameter
//! gradients into [`Param::grad`] and returns the gradient with respect to
//! the layer input.

mod act;
mod block;
mod conv;
mod norm;

pub use act::{leaky_relu, leaky_relu_grad, sigmoid, Relu};
pub use block::ConvBnRelu;
pub use conv::{Conv3d, ConvTranspose3d};
pub use norm::{instance_norm, instance_norm_backward, BatchNorm3d, InstanceStats};

use rand::Rng;
use rand_distr::StandardNormal;

/// Whether a forward pass may update running statistics and cache activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named array of learnable values (or a non-learnable buffer such as a
/// batch-norm running mean).
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Param { value: vec![0.0; len], grad: vec![0.0; len], shape: shape.to_vec(), trainable: true }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let mut p = Param::zeros(shape);
        p.value.fill(v);
        p
    }

    pub fn buffer(shape: &[usize], v: f32) -> Self {
        Param { trainable: false, ..Param::filled(shape, v) }
    }

    /// He-normal initialization: `N(0, 2 / fan_in)`.
    pub fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let mut p = Param::zeros(shape);
        let std = (2.0 / fan_in as f64).sqrt();
        for v in &mut p.value {
            let z: f64 = rng.sample(StandardNormal);
            *v = (z * std) as f32;
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything owning named parameters.
pub trait Module {
    /// Calls `f` on every parameter and buffer with its fully qualified name.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
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
