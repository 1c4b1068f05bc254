//! Gated recurrent unit layer over a single variable-length sequence, with
//! exact backpropagation through time.
//!
//! Recurrence (h_0 = 0, all rows of the output are hidden states aligned
//! with input frames):
//!
//! ```text
//! z_t = sigmoid(x_t W_z + h_prev U_z + b_z)
//! r_t = sigmoid(x_t W_r + h_prev U_r + b_r)
//! c_t = tanh(x_t W_c + (r_t * h_prev) U_c + b_c)
//! h_t = (1 - z_t) * h_prev + z_t * c_t
//! ```
//!
//! A `Backward`-direction layer runs the same recurrence from the last
//! frame to the first, so its state at row 0 has seen the whole sequence.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha20Rng;

use super::{sigmoid, Param, ParamModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }

    fn time_order(self, len: usize) -> Vec<usize> {
        match self {
            Direction::Forward => (0..len).collect(),
            Direction::Backward => (0..len).rev().collect(),
        }
    }
}

/// Per-sequence activations saved by `forward` for the backward pass,
/// all T-by-hidden and indexed by input frame.
#[derive(Debug, Clone)]
pub struct GruCache {
    pub z: Array2<f64>,
    pub r: Array2<f64>,
    pub candidate: Array2<f64>,
    pub hprev: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct GruLayer {
    pub direction: Direction,
    pub w_z: Param,
    pub u_z: Param,
    pub b_z: Param,
    pub w_r: Param,
    pub u_r: Param,
    pub b_r: Param,
    pub w_c: Param,
    pub u_c: Param,
    pub b_c: Param,
}

impl GruLayer {
    pub fn new(
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        direction: Direction,
        rng: &mut ChaCha20Rng,
    ) -> GruLayer {
        let p = |suffix: &str| format!("{prefix}.{suffix}");
        GruLayer {
            direction,
            w_z: Param::glorot(p("w_z"), in_dim, hidden, rng),
            u_z: Param::glorot(p("u_z"), hidden, hidden, rng),
            b_z: Param::zeros(p("b_z"), 1, hidden),
            w_r: Param::glorot(p("w_r"), in_dim, hidden, rng),
            u_r: Param::glorot(p("u_r"), hidden, hidden, rng),
            b_r: Param::zeros(p("b_r"), 1, hidden),
            w_c: Param::glorot(p("w_c"), in_dim, hidden, rng),
            u_c: Param::glorot(p("u_c"), hidden, hidden, rng),
            b_c: Param::zeros(p("b_c"), 1, hidden),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_z.value.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w_z.value.ncols()
    }

    /// Runs the recurrence over `x` (frames-by-in_dim). Returns the hidden
    /// states (frames-by-hidden, row t = state at frame t) and the cache
    /// needed by `backward`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, GruCache)> {
        let t_len = x.nrows();
        if t_len == 0 {
            return Err(Error::Model("empty sequence given to recurrent layer".into()));
        }
        if x.ncols() != self.in_dim() {
            return Err(Error::Model(format!(
                "sequence dimension {} does not match layer input {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        let hidden = self.hidden();

        // Input contributions for every frame in one pass.
        let xz = x.dot(&self.w_z.value);
        let xr = x.dot(&self.w_r.value);
        let xc = x.dot(&self.w_c.value);

        let mut h = Array2::zeros((t_len, hidden));
        let mut cache = GruCache {
            z: Array2::zeros((t_len, hidden)),
            r: Array2::zeros((t_len, hidden)),
            candidate: Array2::zeros((t_len, hidden)),
            hprev: Array2::zeros((t_len, hidden)),
        };

        let mut hp = Array1::<f64>::zeros(hidden);
        for t in self.direction.time_order(t_len) {
            let mut z = &xz.row(t) + &hp.dot(&self.u_z.value) + &self.b_z.value.row(0);
            z.mapv_inplace(sigmoid);
            let mut r = &xr.row(t) + &hp.dot(&self.u_r.value) + &self.b_r.value.row(0);
            r.mapv_inplace(sigmoid);
            let gated = &r * &hp;
            let mut c = &xc.row(t) + &gated.dot(&self.u_c.value) + &self.b_c.value.row(0);
            c.mapv_inplace(f64::tanh);
            let ht = (1.0 - &z) * &hp + &z * &c;

            cache.z.row_mut(t).assign(&z);
            cache.r.row_mut(t).assign(&r);
            cache.candidate.row_mut(t).assign(&c);
            cache.hprev.row_mut(t).assign(&hp);
            h.row_mut(t).assign(&ht);
            hp = ht;
        }
        Ok((h, cache))
    }

    /// Backpropagates `dh` (gradient on every output row) through the
    /// recurrence. Accumulates parameter gradients and returns the
    /// gradient on `x`.
    pub fn backward(
        &mut self,
        x: &Array2<f64>,
        cache: &GruCache,
        dh: &Array2<f64>,
    ) -> Array2<f64> {
        let t_len = x.nrows();
        debug_assert_eq!(dh.nrows(), t_len);
        debug_assert_eq!(dh.ncols(), self.hidden());
        let hidden = self.hidden();

        let mut dz_pre = Array2::<f64>::zeros((t_len, hidden));
        let mut dr_pre = Array2::<f64>::zeros((t_len, hidden));
        let mut dc_pre = Array2::<f64>::zeros((t_len, hidden));

        let mut carry = Array1::<f64>::zeros(hidden);
        for &t in self.direction.time_order(t_len).iter().rev() {
            let d = &dh.row(t) + &carry;
            let z = cache.z.row(t);
            let r = cache.r.row(t);
            let c = cache.candidate.row(t);
            let hp = cache.hprev.row(t);

            let dz = (&c.to_owned() - &hp) * &d * &z * &(1.0 - &z);
            let dc = &d * &z * &(1.0 - &(&c * &c));
            let s = dc.dot(&self.u_c.value.t());
            let dr = &s * &hp * &r * &(1.0 - &r);

            carry = &d * &(1.0 - &z)
                + &(&s * &r)
                + &dz.dot(&self.u_z.value.t())
                + &dr.dot(&self.u_r.value.t());

            dz_pre.row_mut(t).assign(&dz);
            dr_pre.row_mut(t).assign(&dr);
            dc_pre.row_mut(t).assign(&dc);
        }

        let gated = &cache.r * &cache.hprev;
        self.w_z.grad += &x.t().dot(&dz_pre);
        self.u_z.grad += &cache.hprev.t().dot(&dz_pre);
        self.b_z.grad += &dz_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.w_r.grad += &x.t().dot(&dr_pre);
        self.u_r.grad += &cache.hprev.t().dot(&dr_pre);
        self.b_r.grad += &dr_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.w_c.grad += &x.t().dot(&dc_pre);
        self.u_c.grad += &gated.t().dot(&dc_pre);
        self.b_c.grad += &dc_pre.sum_axis(Axis(0)).insert_axis(Axis(0));

        dz_pre.dot(&self.w_z.value.t())
            + dr_pre.dot(&self.w_r.value.t())
            + dc_pre.dot(&self.w_c.value.t())
    }
}

impl ParamModel for GruLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w_z);
        f(&mut self.u_z);
        f(&mut self.b_z);
        f(&mut self.w_r);
        f(&mut self.u_r);
        f(&mut self.b_r);
        f(&mut self.w_c);
        f(&mut self.u_c);
        f(&mut self.b_c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn scalar_layer(direction: Direction) -> GruLayer {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut layer = GruLayer::new("g", 1, 1, direction, &mut rng);
        layer.w_z.value[(0, 0)] = 0.1;
        layer.u_z.value[(0, 0)] = 0.2;
        layer.b_z.value[(0, 0)] = 0.05;
        layer.w_r.value[(0, 0)] = -0.3;
        layer.u_r.value[(0, 0)] = 0.4;
        layer.b_r.value[(0, 0)] = 0.0;
        layer.w_c.value[(0, 0)] = 0.7;
        layer.u_c.value[(0, 0)] = -0.6;
        layer.b_c.value[(0, 0)] = 0.1;
        layer
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let layer = scalar_layer(Direction::Forward);
        let x = array![[0.5]];
        let (h, cache) = layer.forward(&x).unwrap();
        // h_prev = 0 so the reset gate has no effect on the first step.
        let z = sigmoid(0.5 * 0.1 + 0.05);
        let c = (0.5f64 * 0.7 + 0.1).tanh();
        assert!((h[(0, 0)] - z * c).abs() < 1e-15);
        assert!((cache.z[(0, 0)] - z).abs() < 1e-15);
        assert!((cache.candidate[(0, 0)] - c).abs() < 1e-15);
        assert_eq!(cache.hprev[(0, 0)], 0.0);
    }

    #[test]
    fn two_steps_chain_the_state() {
        let layer = scalar_layer(Direction::Forward);
        let x = array![[0.5], [-0.2]];
        let (h, _) = layer.forward(&x).unwrap();
        let h0 = h[(0, 0)];
        let z1 = sigmoid(-0.2 * 0.1 + h0 * 0.2 + 0.05);
        let r1 = sigmoid(-0.2 * -0.3 + h0 * 0.4);
        let c1 = (-0.2f64 * 0.7 + r1 * h0 * -0.6 + 0.1).tanh();
        let expected = (1.0 - z1) * h0 + z1 * c1;
        assert!((h[(1, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn backward_direction_mirrors_forward_on_reversed_input() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let fwd = GruLayer::new("g", 3, 4, Direction::Forward, &mut rng);
        let mut bwd = fwd.clone();
        bwd.direction = Direction::Backward;

        let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let mut reversed = x.clone();
        reversed.invert_axis(Axis(0));

        let (h_b, _) = bwd.forward(&x).unwrap();
        let (mut h_f, _) = fwd.forward(&reversed).unwrap();
        h_f.invert_axis(Axis(0));
        for (a, b) in h_b.iter().zip(h_f.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_and_mismatched_sequences_are_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let layer = GruLayer::new("g", 3, 2, Direction::Forward, &mut rng);
        assert!(layer.forward(&Array2::zeros((0, 3))).is_err());
        assert!(layer.forward(&Array2::zeros((4, 2))).is_err());
    }

    fn bptt_matches_central_difference_for(direction: Direction) {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let mut layer = GruLayer::new("g", 3, 4, direction, &mut rng);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| ((i as f64 - j as f64) * 0.41).cos() * 0.8);
        // Scalar objective: fixed weighted sum of every hidden state.
        let weights = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 4 + j) as f64 * 0.29).sin());
        let loss_of = |layer: &GruLayer, x: &Array2<f64>| {
            (layer.forward(x).unwrap().0 * &weights).sum()
        };

        layer.zero_grads();
        let (_, cache) = layer.forward(&x).unwrap();
        let dx = layer.backward(&x, &cache, &weights);

        let eps = 1e-5;
        let mut worst = 0.0f64;
        let grads: Vec<(String, Array2<f64>)> = {
            let mut v = Vec::new();
            layer.visit_params(&mut |p| v.push((p.name.clone(), p.grad.clone())));
            v
        };
        for (name, grad) in &grads {
            let dim = grad.raw_dim();
            for r in 0..dim[0] {
                for c in 0..dim[1] {
                    let set = |layer: &mut GruLayer, v: f64| {
                        layer.visit_params(&mut |p| {
                            if &p.name == name {
                                p.value[(r, c)] += v;
                            }
                        });
                    };
                    set(&mut layer, eps);
                    let plus = loss_of(&layer, &x);
                    set(&mut layer, -2.0 * eps);
                    let minus = loss_of(&layer, &x);
                    set(&mut layer, eps);
                    let numeric = (plus - minus) / (2.0 * eps);
                    let analytic = grad[(r, c)];
                    let err = (analytic - numeric).abs()
                        / analytic.abs().max(numeric.abs()).max(1e-8);
                    worst = worst.max(err);
                }
            }
        }
        for i in 0..5 {
            for j in 0..3 {
                let mut plus = x.clone();
                plus[(i, j)] += eps;
                let mut minus = x.clone();
                minus[(i, j)] -= eps;
                let numeric = (loss_of(&layer, &plus) - loss_of(&layer, &minus)) / (2.0 * eps);
                let err = (dx[(i, j)] - numeric).abs()
                    / dx[(i, j)].abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(err);
            }
        }
        // Central differences in f64 bottom out around 1e-9 absolute, so
        // small-magnitude entries cannot verify below ~1e-6 relative. A
        // genuine backpropagation bug shows up at 1e-3 or worse.
        assert!(worst < 5e-6, "worst relative error {worst}");
    }

    #[test]
    fn bptt_matches_central_difference_forward() {
        bptt_matches_central_difference_for(Direction::Forward);
    }

    #[test]
    fn bptt_matches_central_difference_backward() {
        bptt_matches_central_difference_for(Direction::Backward);
    }

    #[test]
    fn gradients_accumulate_across_calls() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut layer = GruLayer::new("g", 2, 3, Direction::Forward, &mut rng);
        let x = Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64 * 0.1);
        let dh = Array2::ones((4, 3));

        layer.zero_grads();
        let (_, cache) = layer.forward(&x).unwrap();
        layer.backward(&x, &cache, &dh);
        let once = layer.w_z.grad.clone();
        layer.backward(&x, &cache, &dh);
        let twice = layer.w_z.grad.clone();
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }
}
