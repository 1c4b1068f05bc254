//! Minimal neural-network building blocks: parameters, dense and recurrent
//! layers, the Adam optimizer, and a finite-difference gradient checker.
//!
//! Everything is f64 and deterministic given a seeded RNG; there is no
//! intra-op threading.

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha20Rng;

pub mod adam;
pub mod dense;
pub mod gradcheck;
pub mod gru;

/// One named parameter tensor with its accumulated gradient. Biases are
/// stored as 1-by-n matrices so every parameter has the same shape type.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Param {
        Param {
            name: name.into(),
            value: Array2::zeros((rows, cols)),
            grad: Array2::zeros((rows, cols)),
        }
    }

    /// Glorot uniform initialization: U(-l, l) with l = sqrt(6/(rows+cols)).
    pub fn glorot(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha20Rng,
    ) -> Param {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let value = Array2::from_shape_fn((rows, cols), |_| dist.sample(rng));
        Param {
            name: name.into(),
            grad: Array2::zeros(value.raw_dim()),
            value,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything holding parameters exposes them through a visitor, in a fixed
/// order, with unique names. The optimizer and the gradient checker only
/// see models through this trait.
pub trait ParamModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, otherwise
/// 1/(1-rate), so the expected value of masked activations is unchanged.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha20Rng) -> Array2<f64> {
    assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
    if rate == 0.0 {
        return Array2::ones((rows, cols));
    }
    let keep = 1.0 / (1.0 - rate);
    let dist = Uniform::new(0.0f64, 1.0);
    Array2::from_shape_fn((rows, cols), |_| {
        if dist.sample(rng) < rate {
            0.0
        } else {
            keep
        }
    })
}
