//! Adan optimiser, with a plain Adam mode for debugging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adan,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adan,
            lr: 2e-4,
            beta1: 0.98,
            beta2: 0.92,
            beta3: 0.99,
            eps: 1e-8,
            weight_decay: 0.02,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(unit(self.beta1) && unit(self.beta2) && unit(self.beta3)) {
            return Err(Error::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("eps must be > 0 and weight_decay ≥ 0".into()));
        }
        Ok(())
    }
}

/// Per-parameter moments. In Adam mode only `m` and `n` are used.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub n: Vec<Vec<f64>>,
    pub prev_grad: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        Self {
            m: zeros(),
            v: zeros(),
            n: zeros(),
            prev_grad: zeros(),
            step: 0,
        }
    }

    fn check(&self, params: &[Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, {} gradients, {} state slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {i}: {} values, gradient {}",
                    p.len(),
                    g.len()
                )));
            }
        }
        Ok(())
    }
}

/// One Adan update. On the first step the previous gradient is taken to be
/// the current one, so the gradient difference starts at zero.
pub fn adan_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    hyper: &OptimizerConfig,
) -> Result<()> {
    state.check(params, grads)?;
    state.step += 1;
    let k = state.step as i32;
    let (b1, b2, b3) = (hyper.beta1, hyper.beta2, hyper.beta3);
    let bc1 = 1.0 - b1.powi(k);
    let bc2 = 1.0 - b2.powi(k);
    let bc3 = 1.0 - b3.powi(k);
    let first = state.step == 1;
    let shrink = 1.0 / (1.0 + hyper.lr * hyper.weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        let (m, v, n, prev) = (
            &mut state.m[i],
            &mut state.v[i],
            &mut state.n[i],
            &mut state.prev_grad[i],
        );
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let diff = if first { 0.0 } else { g[j] - prev[j] };
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * diff;
            let u = g[j] + b2 * diff;
            n[j] = b3 * n[j] + (1.0 - b3) * u * u;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let n_hat = n[j] / bc3;
            let step = hyper.lr * (m_hat + b2 * v_hat) / (n_hat.sqrt() + hyper.eps);
            *w = (*w - step) * shrink;
            prev[j] = g[j];
        }
    }
    Ok(())
}

/// One Adam update with decoupled weight decay, using `beta1` and `beta3`.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    hyper: &OptimizerConfig,
) -> Result<()> {
    state.check(params, grads)?;
    state.step += 1;
    let k = state.step as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta3);
    let bc1 = 1.0 - b1.powi(k);
    let bc2 = 1.0 - b2.powi(k);
    let shrink = 1.0 / (1.0 + hyper.lr * hyper.weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        let (m, n) = (&mut state.m[i], &mut state.n[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            n[j] = b2 * n[j] + (1.0 - b2) * g[j] * g[j];
            let step = hyper.lr * (m[j] / bc1) / ((n[j] / bc2).sqrt() + hyper.eps);
            *w = (*w - step) * shrink;
        }
    }
    Ok(())
}

/// Dispatches on `hyper.kind`.
pub fn optimizer_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    hyper: &OptimizerConfig,
) -> Result<()> {
    match hyper.kind {
        OptimizerKind::Adan => adan_step(params, grads, state, hyper),
        OptimizerKind::Adam => adam_step(params, grads, state, hyper),
    }
}
