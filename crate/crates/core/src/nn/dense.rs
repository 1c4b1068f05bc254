//! Fully connected layer and the two loss heads used for multi-task
//! training: multi-class cross-entropy over softmax and binary
//! cross-entropy on a logit.

use ndarray::{Array2, Axis};
use rand_chacha::ChaCha20Rng;

use super::{sigmoid, Param, ParamModel};

/// Probabilities fed to `binary_xent` are clamped to this range so the log
/// never sees 0 or 1 exactly.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Param,
    pub b: Param,
}

impl Dense {
    pub fn new(prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha20Rng) -> Dense {
        Dense {
            w: Param::glorot(format!("{prefix}.w"), fan_in, fan_out, rng),
            b: Param::zeros(format!("{prefix}.b"), 1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.ncols()
    }

    /// y = x W + b for a batch of rows.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.value) + &self.b.value
    }

    /// Accumulates parameter gradients and returns the gradient with
    /// respect to the input. `x` must be the same batch passed to forward.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.w.grad += &x.t().dot(dy);
        self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.value.t())
    }
}

impl ParamModel for Dense {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean cross-entropy of softmax(logits) against integer targets, with the
/// gradient on the logits. Loss per row is computed as logsumexp - z_target
/// so large logits stay exact.
pub fn softmax_xent(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let batch = logits.nrows();
    assert_eq!(batch, targets.len(), "one target per logit row");
    assert!(batch > 0, "empty batch");
    let probs = softmax(logits);
    let mut loss = 0.0;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
    }
    let mut dlogits = probs;
    for (i, &t) in targets.iter().enumerate() {
        dlogits[(i, t)] -= 1.0;
    }
    dlogits /= batch as f64;
    (loss / batch as f64, dlogits)
}

/// Binary cross-entropy of a probability against a boolean label, with the
/// probability clamped away from 0 and 1.
pub fn binary_xent(p: f64, label: bool) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Binary cross-entropy evaluated on the logit `a` (so no clamping is
/// needed): loss = softplus(-a) + (1-y) a, gradient = sigmoid(a) - y.
pub fn binary_xent_logit(a: f64, label: bool) -> (f64, f64) {
    let softplus_neg = if a >= 0.0 {
        (-a).exp().ln_1p()
    } else {
        -a + a.exp().ln_1p()
    };
    let y = if label { 1.0 } else { 0.0 };
    (softplus_neg + (1.0 - y) * a, sigmoid(a) - y)
}

/// Fraction of rows whose argmax matches the target.
pub fn accuracy(logits: &Array2<f64>, targets: &[usize]) -> f64 {
    assert_eq!(logits.nrows(), targets.len());
    let mut hits = 0usize;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if argmax == t {
            hits += 1;
        }
    }
    hits as f64 / targets.len().max(1) as f64
}
