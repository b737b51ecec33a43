//! AdamW with decoupled weight decay, global-norm clipping and a
//! warmup-then-constant learning rate.

use crate::autograd::{Gradients, Mat, ParamId, Params};
use crate::error::{CalmError, Result};

/// Linear ramp from 0 to `lr` over `round(warmup_fraction · total_steps)`
/// steps, constant afterwards.
pub fn lr_schedule(step: usize, total_steps: usize, lr: f64, warmup_fraction: f64) -> Result<f64> {
    if step > total_steps {
        return Err(CalmError::Contract(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    let warmup = (warmup_fraction * total_steps as f64).round() as usize;
    if warmup == 0 || step >= warmup {
        return Ok(lr);
    }
    Ok(lr * step as f64 / warmup as f64)
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(params: &Params, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, _, p)| Mat::zeros(p.dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Decay applies to weight matrices only; single-row
    /// parameters (biases, norm gains) are not decayed.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            let decay = if p.nrows() > 1 { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * (mh / (vh.sqrt() + self.eps) + decay * *p);
                });
        }
    }
}
