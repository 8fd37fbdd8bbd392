use std::f64::consts::PI;

use crate::error::{shape_err, Result};
use crate::numerics::Tensor;
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
        }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn zeros_like(params: &ParamSet) -> Self {
        let mut m = ParamSet::new();
        for (name, p) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(p.shape()));
        }
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One AdamW step over every parameter with an entry in `grads`.
///
/// Weight decay is decoupled: `p -= lr * wd * p` happens before the Adam update.
/// Parameters without a gradient are left alone.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(shape_err!(
                "gradient for {name} is {:?}, parameter is {:?}",
                g.shape(),
                p.shape()
            ));
        }
        for moments in [&state.m, &state.v] {
            let s = moments.get(name)?;
            if s.shape() != p.shape() {
                return Err(shape_err!(
                    "optimizer state for {name} is {:?}, parameter is {:?}",
                    s.shape(),
                    p.shape()
                ));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (name, g) in grads.iter() {
        let m = state.m.get_mut(name)?.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        let p = params.get_mut(name)?.data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *p -= lr * opt.weight_decay * *p;
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Cosine decay from `base` at step 0 to 0 at `total_steps - 1`.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return base;
    }
    let frac = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
    base * 0.5 * (1.0 + (PI * frac).cos())
}
