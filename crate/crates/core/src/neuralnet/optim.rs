//! Adam (fluency classifier) and stepped-decay SGD (caption generator).

use serde::{Deserialize, Serialize};

use super::params::{check_same_shape, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<(usize, usize)>,
}

impl AdamState {
    pub fn new<P: ParamSet>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        AdamState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
            shapes: params.shapes(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<P: ParamSet>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    check_same_shape(params, grads)?;
    if params.shapes() != state.shapes {
        return Err(Error::Dimension(
            "optimizer state was created for different parameters".into(),
        ));
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let correct1 = 1.0 - beta1.powi(t);
    let correct2 = 1.0 - beta2.powi(t);
    let grad_tensors = grads.tensors();
    for (k, p) in params.tensors_mut().into_iter().enumerate() {
        let g = grad_tensors[k].data;
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / correct1;
            let v_hat = v[i] / correct2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Learning rate that is multiplied by `decay` once every `every` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdSchedule {
    pub base_lr: f64,
    pub decay: f64,
    pub every: usize,
}

impl Default for SgdSchedule {
    fn default() -> Self {
        SgdSchedule {
            base_lr: 0.001,
            decay: 0.999,
            every: 10,
        }
    }
}

impl SgdSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let periods = epoch.checked_div(self.every).unwrap_or(0);
        self.base_lr * self.decay.powi(periods as i32)
    }
}

/// `p ← p − lr(epoch) · g`
pub fn sgd_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    schedule: &SgdSchedule,
    epoch: usize,
) -> Result<()> {
    params.add_scaled(grads, -schedule.lr(epoch))
}
