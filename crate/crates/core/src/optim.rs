//! SGD with momentum, L2 weight decay and polynomial learning-rate decay.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub max_iter: usize,
    buffers: Vec<f64>,
}

impl OptimState {
    pub fn new(
        base_lr: f64,
        momentum: f64,
        weight_decay: f64,
        poly_power: f64,
        max_iter: usize,
        n_params: usize,
    ) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {base_lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && poly_power >= 0.0) {
            return Err(Error::Parameter(
                "weight decay and poly power must be >= 0".into(),
            ));
        }
        if max_iter == 0 {
            return Err(Error::Parameter("max_iter must be positive".into()));
        }
        Ok(Self {
            base_lr,
            momentum,
            weight_decay,
            poly_power,
            max_iter,
            buffers: vec![0.0; n_params],
        })
    }

    /// `base_lr · (1 - iter/max_iter)^power`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let frac = 1.0 - (iter.min(self.max_iter) as f64 / self.max_iter as f64);
        self.base_lr * frac.powf(self.poly_power)
    }

    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }
}

/// One descent step: `g += wd·θ; buf = m·buf + g; θ -= lr_t·buf`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimState,
    iter: usize,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.buffers.len() {
        return Err(Error::Dimension(format!(
            "{} params, {} grads, {} momentum buffers",
            params.len(),
            grads.len(),
            state.buffers.len()
        )));
    }
    let lr = state.lr_at(iter);
    let (m, wd) = (state.momentum, state.weight_decay);
    for ((p, &g), b) in params.iter_mut().zip(grads).zip(state.buffers.iter_mut()) {
        let g = g + wd * *p;
        *b = m * *b + g;
        *p -= lr * *b;
    }
    Ok(lr)
}
