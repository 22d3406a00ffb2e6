use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![T::zero(); len], v: vec![T::zero(); len] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
}

/// One AdamW update at step `t ≥ 1`: decoupled decay `θ ← θ(1 − lr·wd)`
/// followed by `θ ← θ − lr · m̂ / (√v̂ + ε)` with bias-corrected moments.
pub fn adamw_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, t: u64, h: AdamHyper) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("params {}, grads {}, state {}", params.len(), grads.len(), state.m.len()),
        ));
    }
    if t == 0 {
        return Err(Error::invalid("adamw_step", "step count starts at 1"));
    }
    let (b1, b2) = h.betas;
    let c1 = T::of(1.0 - b1.powi(t as i32));
    let c2 = T::of(1.0 - b2.powi(t as i32));
    let (b1, b2) = (T::of(b1), T::of(b2));
    let (one, lr, eps) = (T::one(), T::of(h.lr), T::of(h.eps));
    let decay = one - T::of(h.lr * h.weight_decay);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Linear warmup to `base_lr` over `warmup_steps`, then cosine decay to
/// `min_lr` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, min_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    min_lr + (base_lr - min_lr) * (1.0 + (PI * progress).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(lr: f64, wd: f64) -> AdamHyper {
        AdamHyper { lr, betas: (0.9, 0.999), weight_decay: wd, eps: ADAM_EPS }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = vec![0.3f64, -1.2, 4.0];
        let orig = p.clone();
        let mut s = AdamState::new(3);
        for t in 1..=5 {
            adamw_step(&mut p, &[0.0; 3], &mut s, t, hyper(0.1, 0.0)).unwrap();
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn decoupled_decay_scales_exactly() {
        let mut p = vec![2.0f64, -0.5, 1e-3];
        let orig = p.clone();
        let mut s = AdamState::new(3);
        adamw_step(&mut p, &[0.0; 3], &mut s, 1, hyper(0.1, 0.05)).unwrap();
        let factor = 1.0 - 0.1 * 0.05;
        for (a, b) in p.iter().zip(&orig) {
            assert_eq!(*a, b * factor);
        }
        assert!((factor - 0.995).abs() < 1e-16);
    }

    #[test]
    fn constant_gradient_moves_by_lr_times_sign() {
        let mut p = vec![0.0f64, 0.0];
        let mut s = AdamState::new(2);
        let g = [0.3, -2.0];
        let mut prev = p.clone();
        for t in 1..=200 {
            adamw_step(&mut p, &g, &mut s, t, hyper(0.01, 0.0)).unwrap();
            for i in 0..2 {
                let step = p[i] - prev[i];
                let expected = -0.01 * g[i] / (g[i].abs() + ADAM_EPS);
                assert!((step - expected).abs() < 1e-9, "t={t} i={i} {step} vs {expected}");
            }
            prev = p.clone();
        }
    }

    #[test]
    fn shape_mismatch_and_zero_step() {
        let mut s = AdamState::<f64>::new(2);
        assert!(adamw_step(&mut [0.0, 1.0], &[0.0], &mut s, 1, hyper(0.1, 0.0)).is_err());
        assert!(adamw_step(&mut [0.0, 1.0], &[0.0, 0.0], &mut s, 0, hyper(0.1, 0.0)).is_err());
    }

    #[test]
    fn cosine_schedule_landmarks() {
        let (base, min) = (1e-3, 1e-5);
        assert_eq!(cosine_lr(10, 110, 10, base, min), base);
        assert_eq!(cosine_lr(110, 110, 10, base, min), min);
        assert!((cosine_lr(60, 110, 10, base, min) - (base + min) / 2.0).abs() < 1e-15);
        assert_eq!(cosine_lr(0, 110, 10, base, min), 0.0);
        assert!((cosine_lr(5, 110, 10, base, min) - base / 2.0).abs() < 1e-18);
        assert_eq!(cosine_lr(0, 50, 0, base, min), base);
    }
}
