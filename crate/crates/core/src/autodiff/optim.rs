//! Adam with bias correction and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step: u64,
}

impl OptimizerState {
    /// Zero moments shaped like `shapes`.
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let first_moment: Vec<Matrix> = shapes.into_iter().map(|(r, c)| Matrix::zeros(r, c)).collect();
        let second_moment = first_moment.clone();
        Self {
            config,
            first_moment,
            second_moment,
            step: 0,
        }
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::sum_of_squares).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// One clipped Adam update. Returns the gradient norm before clipping.
pub fn adam_step(params: &mut [&mut Matrix], mut grads: Vec<Matrix>, state: &mut OptimizerState) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::LengthMismatch(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(&grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "parameter {:?}, gradient {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    let norm = match state.config.clip_norm {
        Some(c) => clip_global_norm(&mut grads, c),
        None => global_norm(&grads),
    };
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    let AdamConfig {
        lr, beta1, beta2, eps, ..
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let (p, g, m, v) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(norm)
}
