//! Trainable parameter blocks with Adam moment buffers.
//!
//! Every learnable quantity in the pipeline (anchor features, offsets,
//! log-scales, decoder weights, appearance embeddings, φ weights) is stored as
//! a flat [`Param`] so the optimizer update, checkpointing and gradient
//! bookkeeping are uniform.

/// Adam hyperparameters. ε is deliberately tiny; all math is f64.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// A flat trainable vector plus first/second Adam moments.
///
/// The moment buffers always have the same length as `val`; they are zeroed
/// on construction and excluded from checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub val: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    pub fn new(val: Vec<f64>) -> Self {
        let n = val.len();
        Self {
            val,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.val.is_empty()
    }

    /// One Adam step with bias correction. `step` is the 1-based global step
    /// count of the owning group. A zero gradient leaves `val` untouched only
    /// when the moments are also zero, so callers must pass the true gradient
    /// every step (standard Adam semantics).
    pub fn adam_step(&mut self, grad: &[f64], lr: f64, cfg: &AdamConfig, step: u64) {
        assert_eq!(grad.len(), self.val.len(), "gradient shape mismatch");
        let b1t = 1.0 - cfg.beta1.powi(step as i32);
        let b2t = 1.0 - cfg.beta2.powi(step as i32);
        for i in 0..self.val.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            self.val[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of [`sigmoid`] at `x`.
pub fn dsigmoid(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// SplitMix64 step; used to derive independent deterministic seeds from a
/// base seed and a salt without relying on unstable std hashing.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn adam_zero_grad_keeps_fresh_param_unchanged() {
        let mut p = Param::new(vec![1.0, -2.0, 3.0]);
        let before = p.val.clone();
        p.adam_step(&[0.0, 0.0, 0.0], 1e-2, &AdamConfig::default(), 1);
        assert_eq!(p.val, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction, step 1 moves each coordinate by
        // lr·g/(|g| + eps) ≈ lr·sign(g).
        let mut p = Param::new(vec![0.0, 0.0]);
        p.adam_step(&[0.5, -3.0], 1e-2, &AdamConfig::default(), 1);
        assert_relative_eq!(p.val[0], -1e-2, epsilon = 1e-9);
        assert_relative_eq!(p.val[1], 1e-2, epsilon = 1e-9);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = Param::new(vec![5.0]);
        let cfg = AdamConfig::default();
        for step in 1..=2000 {
            let g = 2.0 * p.val[0];
            p.adam_step(&[g], 1e-2, &cfg, step);
        }
        assert!(p.val[0].abs() < 1e-2, "did not converge: {}", p.val[0]);
    }

    #[test]
    fn sigmoid_matches_reference_points() {
        assert_relative_eq!(sigmoid(0.0), 0.5);
        assert_relative_eq!(sigmoid(700.0), 1.0);
        assert!(sigmoid(-700.0) > 0.0);
        assert_relative_eq!(sigmoid(2.0) + sigmoid(-2.0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn dsigmoid_matches_finite_difference() {
        for &x in &[-3.0, -0.5, 0.0, 1.2, 4.0] {
            let h = 1e-6;
            let fd = (sigmoid(x + h) - sigmoid(x - h)) / (2.0 * h);
            assert_relative_eq!(dsigmoid(x), fd, epsilon = 1e-9);
        }
    }

    #[test]
    fn derive_seed_varies_with_salt() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(42, 0));
    }
}
