//! Adam with bias correction plus the cosine learning-rate schedule.

use crate::error::{CoreError, Result};
use crate::param::{Param, VisitParams};
use crate::tensor::Scalar;
use std::collections::HashMap;

/// One Adam update on raw slices. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<E: Scalar>(
    value: &mut [E],
    grad: &[E],
    m: &mut [E],
    v: &mut [E],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if grad.len() != value.len() || m.len() != value.len() || v.len() != value.len() {
        return Err(CoreError::shape(
            "adam_step",
            format!("{} values", value.len()),
            format!("grad {}, m {}, v {}", grad.len(), m.len(), v.len()),
        ));
    }
    let b1 = E::from_f64(beta1);
    let b2 = E::from_f64(beta2);
    let one = E::one();
    let corr1 = E::from_f64(1.0 - beta1.powi(t as i32));
    let corr2 = E::from_f64(1.0 - beta2.powi(t as i32));
    let lr_e = E::from_f64(lr);
    let eps_e = E::from_f64(eps);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        value[i] = value[i] - lr_e * m_hat / (v_hat.sqrt() + eps_e);
    }
    Ok(())
}

/// lr(epoch) = lr_min + (lr0 - lr_min) * 0.5 * (1 + cos(pi * epoch / total)).
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, lr_min: f64) -> f64 {
    assert!(total_epochs > 0, "cosine_lr over zero epochs");
    let t = epoch as f64 / total_epochs as f64;
    lr_min + (lr0 - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Optimizer driving `adam_step` over every parameter of a model.
/// Moment slots are keyed by parameter name and created lazily.
pub struct Adam<E> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: HashMap<String, (Vec<E>, Vec<E>)>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, model: &mut dyn VisitParams<E>) -> Result<()> {
        self.t += 1;
        let t = self.t;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let slots = &mut self.slots;
        let mut result = Ok(());
        model.visit_params(&mut |p: &mut Param<E>| {
            if result.is_err() {
                return;
            }
            let slot = slots
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![E::zero(); p.numel()], vec![E::zero(); p.numel()]));
            let grad = p.grad().data().to_vec();
            result = adam_step(
                p.value_mut().data_mut(),
                &grad,
                &mut slot.0,
                &mut slot.1,
                t,
                lr,
                b1,
                b2,
                eps,
            );
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar recurrence written out longhand, the reference for adam_step.
    fn scalar_adam(
        mut x: f64,
        grads: &[f64],
        lr: f64,
        b1: f64,
        b2: f64,
        eps: f64,
    ) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    #[test]
    fn first_step_has_unit_bias_corrected_ratio() {
        let mut x = vec![0.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_step(&mut x, &[1.0], &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8).unwrap();
        // m_hat = v_hat = 1, so the move is exactly -lr / (1 + eps).
        let want = -0.1 / (1.0 + 1e-8);
        assert!((x[0] - want).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_recurrence_over_many_steps() {
        let grads: Vec<f64> = (0..25).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let want = scalar_adam(2.0, &grads, 0.05, 0.9, 0.999, 1e-8);
        let mut x = vec![2.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        for (i, &g) in grads.iter().enumerate() {
            adam_step(&mut x, &[g], &mut m, &mut v, (i + 1) as u64, 0.05, 0.9, 0.999, 1e-8)
                .unwrap();
        }
        assert!((x[0] - want).abs() < 1e-12);
    }

    #[test]
    fn state_shape_mismatch_is_an_error() {
        let mut x = vec![0.0f64; 2];
        let (mut m, mut v) = (vec![0.0], vec![0.0, 0.0]);
        assert!(adam_step(&mut x, &[1.0, 1.0], &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn cosine_schedule_hits_both_endpoints() {
        let lr0 = 4e-4;
        let lr_min = 1e-7;
        assert!((cosine_lr(0, 160, lr0, lr_min) - lr0).abs() < 1e-18);
        assert!((cosine_lr(160, 160, lr0, lr_min) - lr_min).abs() < 1e-18);
        // Midpoint sits halfway between the endpoints.
        let mid = cosine_lr(80, 160, lr0, lr_min);
        assert!((mid - (lr0 + lr_min) / 2.0).abs() < 1e-12);
        // Monotone decrease across the whole range.
        let mut prev = f64::INFINITY;
        for e in 0..=160 {
            let lr = cosine_lr(e, 160, lr0, lr_min);
            assert!(lr < prev);
            prev = lr;
        }
    }
}
