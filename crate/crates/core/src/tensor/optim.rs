//! Adam with bias correction.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params(params: &[&Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One Adam update over `params` in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameter tensors", params.len()),
            format!("{} grads / {} moment buffers", grads.len(), state.m.len()),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || m.len() != p.numel() {
            return Err(Error::shape("adam_step", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut next = p.data().to_vec();
        for (j, (&gj, pj)) in g.data().iter().zip(next.iter_mut()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *pj -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        p.assign(&next)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(&[3], vec![0.5, -2.0, 1e-3]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::for_params(&[&p]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default()).unwrap();
        }
        assert!(p.bitwise_eq(&before));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr * g / (|g| + eps).
        for g0 in [0.7, -3.0, 1e-2] {
            let mut p = Tensor::new(&[1], vec![1.0]).unwrap();
            let g = Tensor::new(&[1], vec![g0]).unwrap();
            let mut st = AdamState::for_params(&[&p]);
            let cfg = AdamConfig::default();
            adam_step(&mut [&mut p], &[&g], &mut st, &cfg).unwrap();
            let expected = 1.0 - cfg.lr * g0 / (g0.abs() + cfg.eps);
            assert!((p.data()[0] - expected).abs() < 1e-15);
            assert!(((1.0 - p.data()[0]).abs() - cfg.lr).abs() < 1e-9);
        }
    }

    #[test]
    fn two_steps_match_recurrence() {
        let cfg = AdamConfig::default();
        let g0 = 0.25;
        let mut p = Tensor::new(&[1], vec![0.0]).unwrap();
        let g = Tensor::new(&[1], vec![g0]).unwrap();
        let mut st = AdamState::for_params(&[&p]);
        adam_step(&mut [&mut p], &[&g], &mut st, &cfg).unwrap();
        adam_step(&mut [&mut p], &[&g], &mut st, &cfg).unwrap();

        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * g0;
            v = 0.999 * v + 0.001 * g0 * g0;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 3e-4 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.data()[0] - x).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::for_params(&[&p]);
        assert!(adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default()).is_err());
    }
}
