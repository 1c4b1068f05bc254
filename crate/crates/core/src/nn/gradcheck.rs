//! Central-difference gradient verification.
//!
//! Contract: the caller runs forward and backward once so the analytic
//! gradients sit in the model, then hands over a deterministic loss
//! closure (same data, same masks, same pairs on every call). The checker
//! snapshots the analytic gradients, perturbs sampled parameter entries by
//! +/- epsilon, and compares (loss(+) - loss(-)) / (2 epsilon) against the
//! snapshot.

use rand::seq::index::sample;
use rand_chacha::ChaCha20Rng;

use crate::error::Result;

use super::ParamModel;

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Relative error with an absolute floor so near-zero pairs do not explode.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks at least `min_samples` parameter entries (every tensor gets at
/// least one), spread proportionally to tensor size.
pub fn grad_check<M, F>(
    model: &mut M,
    mut loss: F,
    min_samples: usize,
    epsilon: f64,
    rng: &mut ChaCha20Rng,
) -> Result<GradCheckReport>
where
    M: ParamModel,
    F: FnMut(&mut M) -> Result<f64>,
{
    // Snapshot names, sizes, and analytic gradients.
    let mut names = Vec::new();
    let mut grads = Vec::new();
    model.visit_params(&mut |p| {
        names.push(p.name.clone());
        grads.push(p.grad.clone());
    });
    let total: usize = grads.iter().map(|g| g.len()).sum();
    assert!(total > 0, "model has no parameters");

    // Proportional allocation, at least one entry per tensor, capped at
    // the tensor size.
    let mut plan: Vec<(usize, Vec<usize>)> = Vec::new();
    for (pi, g) in grads.iter().enumerate() {
        let n = g.len();
        let want = ((min_samples as f64 * n as f64 / total as f64).ceil() as usize)
            .clamp(1, n);
        let picked = if want == n {
            (0..n).collect()
        } else {
            sample(rng, n, want).into_vec()
        };
        plan.push((pi, picked));
    }

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    for (pi, indices) in plan {
        let name = &names[pi];
        let cols = grads[pi].ncols();
        for flat in indices {
            let pos = (flat / cols, flat % cols);
            nudge(model, name, pos, epsilon);
            let plus = loss(model)?;
            nudge(model, name, pos, -2.0 * epsilon);
            let minus = loss(model)?;
            nudge(model, name, pos, epsilon);

            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grads[pi][pos];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = flat;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn nudge<M: ParamModel>(model: &mut M, name: &str, pos: (usize, usize), delta: f64) {
    model.visit_params(&mut |p| {
        if p.name == name {
            p.value[pos] += delta;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::dense::{softmax_xent, Dense};
    use crate::nn::ParamModel;
    use ndarray::Array2;
    use rand::SeedableRng;

    struct Classifier {
        layer: Dense,
    }

    impl ParamModel for Classifier {
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param)) {
            self.layer.visit_params(f);
        }
    }

    fn fixture() -> (Classifier, Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let model = Classifier {
            layer: Dense::new("clf", 6, 4, &mut rng),
        };
        let x = Array2::from_shape_fn((8, 6), |(i, j)| ((i * 6 + j) as f64 * 0.77).sin());
        let targets: Vec<usize> = (0..8).map(|i| i % 4).collect();
        (model, x, targets)
    }

    #[test]
    fn dense_softmax_gradients_verify_tightly() {
        let (mut model, x, targets) = fixture();
        model.zero_grads();
        let logits = model.layer.forward(&x);
        let (_, dlogits) = softmax_xent(&logits, &targets);
        model.layer.backward(&x, &dlogits);

        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let report = grad_check(
            &mut model,
            |m| Ok(softmax_xent(&m.layer.forward(&x), &targets).0),
            200,
            DEFAULT_EPSILON,
            &mut rng,
        )
        .unwrap();
        assert!(report.checked >= 28, "checked {}", report.checked);
        assert!(report.max_rel_err < 1e-7, "max err {}", report.max_rel_err);
    }

    #[test]
    fn a_planted_gradient_bug_is_caught_and_named() {
        let (mut model, x, targets) = fixture();
        model.zero_grads();
        let logits = model.layer.forward(&x);
        let (_, dlogits) = softmax_xent(&logits, &targets);
        model.layer.backward(&x, &dlogits);
        // Corrupt one bias gradient by 5 percent.
        model.layer.b.grad[(0, 2)] *= 1.05;

        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let report = grad_check(
            &mut model,
            |m| Ok(softmax_xent(&m.layer.forward(&x), &targets).0),
            200,
            DEFAULT_EPSILON,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err > 1e-3, "max err {}", report.max_rel_err);
        assert_eq!(report.worst_param, "clf.b");
        assert_eq!(report.worst_index, 2);
    }

    #[test]
    fn every_tensor_is_sampled_even_with_a_tiny_budget() {
        let (mut model, x, targets) = fixture();
        model.zero_grads();
        let logits = model.layer.forward(&x);
        let (_, dlogits) = softmax_xent(&logits, &targets);
        model.layer.backward(&x, &dlogits);

        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let report = grad_check(
            &mut model,
            |m| Ok(softmax_xent(&m.layer.forward(&x), &targets).0),
            1,
            DEFAULT_EPSILON,
            &mut rng,
        )
        .unwrap();
        // 24 weight entries + 4 bias entries, budget 1: at least one each.
        assert!(report.checked >= 2);
    }

    #[test]
    fn relative_error_floors_near_zero_pairs() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 0.0) < 1e-3);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn parameters_are_restored_after_checking() {
        let (mut model, x, targets) = fixture();
        model.zero_grads();
        let logits = model.layer.forward(&x);
        let (_, dlogits) = softmax_xent(&logits, &targets);
        model.layer.backward(&x, &dlogits);
        let before = model.layer.w.value.clone();

        let mut rng = ChaCha20Rng::seed_from_u64(4);
        grad_check(
            &mut model,
            |m| Ok(softmax_xent(&m.layer.forward(&x), &targets).0),
            50,
            DEFAULT_EPSILON,
            &mut rng,
        )
        .unwrap();
        for (a, b) in before.iter().zip(model.layer.w.value.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
