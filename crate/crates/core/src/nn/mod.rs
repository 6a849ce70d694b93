//! Minimal convolutional network layers with explicit backward passes.
//!
//! Every layer caches what its backward pass needs during a [`Mode::Train`]
//! forward call; [`Mode::Eval`] forwards keep no state. `backward` consumes the
//! cache, accumulates parameter gradients into [`Param::grad`] and returns the
//! gradient with respect to the layer input.

mod conv;
mod layers;
mod norm;

pub use conv::Conv2d;
pub use layers::{BilinearResize, MaxPool2d, Relu, Sigmoid};
pub use norm::BatchNorm2d;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named tensor owned by a layer. Non-trainable params (batch-norm running
/// statistics) are checkpointed but never touched by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>, trainable: bool) -> Self {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "param length mismatch");
        let grad = if trainable { vec![T::zero(); value.len()] } else { Vec::new() };
        Self {
            shape,
            value,
            grad,
            trainable,
        }
    }

    pub fn filled(shape: Vec<usize>, v: T, trainable: bool) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![v; len], trainable)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything holding named parameters.
pub trait Module<T: Scalar> {
    /// Calls `f` on every parameter in a fixed order with its dotted path.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grads<T: Scalar, M: Module<T> + ?Sized>(m: &mut M) {
    m.visit("", &mut |_, p| p.zero_grad());
}

pub fn trainable_count<T: Scalar, M: Module<T> + ?Sized>(m: &mut M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| {
        if p.trainable {
            n += p.len();
        }
    });
    n
}

/// He-normal initialization with `fan_out` scaling, as used for ReLU networks.
pub fn kaiming_normal<T: Scalar, R: Rng + ?Sized>(len: usize, fan_out: usize, rng: &mut R) -> Vec<T> {
    let std = (2.0 / fan_out as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| T::lit(dist.sample(rng))).collect()
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual bias initialization.
pub fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
}
