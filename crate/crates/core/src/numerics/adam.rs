use std::collections::BTreeMap;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First/second moment estimates per named parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update.
///
/// `params` yields `(name, tensor)` pairs to update; each must have a
/// same-shape entry in `grads`. Parameters without a gradient are left alone.
pub fn adam_step<'a, F, I>(
    params: I,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()>
where
    F: Real,
    I: IntoIterator<Item = (&'a str, &'a mut Tensor<F>)>,
{
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(Error::invalid("adam: betas must lie in [0, 1)"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, param) in params {
        let Some(grad) = grads.get(name) else {
            continue;
        };
        if grad.shape() != param.shape() {
            return Err(Error::shape("adam_step", param.shape(), grad.shape()));
        }
        let mom = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        if mom.m.len() != param.len() {
            return Err(Error::shape("adam_step", param.shape(), &[mom.m.len()]));
        }
        for ((p, g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(mom.m.iter_mut().zip(mom.v.iter_mut()))
        {
            let g = g.as_f64();
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            let delta = cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            *p = F::from_f64_lossy(p.as_f64() - delta);
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut BTreeMap<String, Tensor<F>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64_lossy(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
