//! Poly learning-rate schedule and SGD with classic momentum and weight
//! decay folded into the gradient.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `lr = lr0 · (1 − iter/total_iter)^power`. Monotone non-increasing in
/// `iter`; `iter == total_iter` gives exactly 0.
pub fn poly_lr(iter: usize, total_iter: usize, lr0: f64, power: f64) -> Result<f64> {
    if iter > total_iter {
        return Err(Error::InvalidArgument {
            op: "poly_lr",
            msg: format!("iter {iter} exceeds total_iter {total_iter}"),
        });
    }
    Ok(lr0 * (1.0 - iter as f64 / total_iter as f64).powf(power))
}

/// One momentum-SGD update:
/// `v ← momentum·v + (grad + weight_decay·w)`, then `w ← w − lr·v`.
pub fn sgd_update(
    weights: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if weights.len() != grads.len() || weights.len() != velocity.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_update",
            lhs: vec![weights.len()],
            rhs: vec![grads.len(), velocity.len()],
        });
    }
    for ((w, &g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *w);
        *w -= lr * *v;
    }
    Ok(())
}

/// Velocity state keyed by parameter name, so checkpoints can carry it and
/// resumed runs continue bit-exactly.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Sgd {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Apply one update to a named parameter, swapping in the new tensor.
    /// `decay` selects whether weight decay applies (conv weights and
    /// gamma: yes; biases and memory items: no). The gradient accumulator
    /// is consumed: read, applied, zeroed.
    pub fn step_param(&mut self, name: &str, tensor: &mut Tensor, lr: f64, decay: bool) -> Result<()> {
        let grad = tensor.grad().ok_or_else(|| Error::InvalidArgument {
            op: "sgd",
            msg: format!("parameter `{name}` does not track gradients"),
        })?;
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGrad { name: name.to_string() });
        }
        let mut weights = tensor.data().to_vec();
        let velocity = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; weights.len()]);
        let wd = if decay { self.weight_decay } else { 0.0 };
        sgd_update(&mut weights, &grad, velocity, lr, self.momentum, wd)?;
        *tensor = Tensor::param(tensor.shape().to_vec(), weights);
        Ok(())
    }

    /// Velocity blocks in name order (deterministic serialization).
    pub fn velocities_sorted(&self) -> Vec<(&str, &[f64])> {
        let mut entries: Vec<_> = self
            .velocity
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_slice()))
            .collect();
        entries.sort_by_key(|(k, _)| *k);
        entries
    }

    pub fn set_velocity(&mut self, name: &str, v: Vec<f64>) {
        self.velocity.insert(name.to_string(), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn poly_lr_endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 100, 0.01, 0.9).unwrap(), 0.01);
        assert_eq!(poly_lr(100, 100, 0.01, 0.9).unwrap(), 0.0);
        // frozen closed-form value at the midpoint
        assert_relative_eq!(
            poly_lr(50, 100, 0.01, 0.9).unwrap(),
            0.005358867312681466,
            epsilon = 1e-15
        );
        assert!(poly_lr(101, 100, 0.01, 0.9).is_err());
    }

    #[test]
    fn poly_lr_is_monotone_non_increasing() {
        let mut prev = f64::INFINITY;
        for it in 0..=200 {
            let lr = poly_lr(it, 200, 0.01, 0.9).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn vanilla_sgd_is_a_plain_gradient_step() {
        let mut w = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_update(&mut w, &[0.5, -0.5], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(w, vec![0.95, -1.95]);
    }

    #[test]
    fn zero_grads_decay_velocity_geometrically() {
        let mut w = vec![0.0];
        let mut v = vec![1.0];
        for step in 1..=4 {
            sgd_update(&mut w, &[0.0], &mut v, 0.0, 0.9, 0.0).unwrap();
            assert_relative_eq!(v[0], 0.9f64.powi(step), epsilon = 1e-15);
        }
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        // f(w) = w²/2 so grad = w; lr 0.1, momentum 0.9, decay 0.01.
        // Unrolled by hand:
        //   v1 = 0 + (1 + 0.01·1)            = 1.01
        //   w1 = 1 − 0.1·1.01                = 0.899
        //   v2 = 0.9·1.01 + (0.899 + 0.00899) = 1.81699
        //   w2 = 0.899 − 0.181699             = 0.717301
        let mut w = vec![1.0];
        let mut v = vec![0.0];
        sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.01).unwrap();
        assert_relative_eq!(v[0], 1.01, epsilon = 1e-15);
        assert_relative_eq!(w[0], 0.899, epsilon = 1e-15);
        let g = w[0];
        sgd_update(&mut w, &[g], &mut v, 0.1, 0.9, 0.01).unwrap();
        assert_relative_eq!(v[0], 1.81699, epsilon = 1e-12);
        assert_relative_eq!(w[0], 0.717301, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_grad_names_the_parameter() {
        let mut sgd = Sgd::new(0.9, 0.0);
        let mut t = Tensor::param([1], vec![1.0]);
        t.accumulate_grad(&[f64::NAN]);
        match sgd.step_param("enc0.weight", &mut t, 0.1, true) {
            Err(Error::NonFiniteGrad { name }) => assert_eq!(name, "enc0.weight"),
            other => panic!("expected NonFiniteGrad, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut w = vec![1.0, 2.0];
        let mut v = vec![0.0, 0.0];
        assert!(sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0).is_err());
    }
}
