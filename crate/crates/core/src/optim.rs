use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: usize) -> &Tensor {
        &self.m[id]
    }
}

/// One bias-corrected Adam update. `frozen[i]` parameters are skipped and
/// their moments left as they were. Parameters without a gradient entry are
/// updated as if their gradient were zero.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
    frozen: &[bool],
) -> Result<()> {
    if cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if params.len() != state.m.len() || frozen.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} params, {} optimizer slots, {} freeze flags",
            params.len(),
            state.m.len(),
            frozen.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, p) in params.iter_mut().enumerate() {
        if frozen[id] {
            continue;
        }
        let g = grads.get(id);
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                ));
            }
        }
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g.data()[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
