//! First-order optimizers over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdState<T> {
    pub velocity: Vec<T>,
}

/// Hyperparameters shared by both optimizers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to θ rather than adding it to the gradient.
    pub decoupled: bool,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }
}

impl<T: Scalar> SgdState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            velocity: vec![T::zero(); n],
        }
    }
}

fn check(params: usize, grad: &[impl Scalar], mask: Option<&[bool]>) -> Result<()> {
    if grad.len() != params || mask.is_some_and(|m| m.len() != params) {
        return Err(Error::Dimension(format!(
            "optimizer step on {params} parameters with {} gradient entries",
            grad.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(())
}

/// Effective gradient including coupled weight decay on masked entries.
fn decayed<T: Scalar>(theta: T, g: T, decay: bool, cfg: &StepConfig) -> T {
    if decay && !cfg.decoupled && cfg.weight_decay != 0.0 {
        g + T::lit(cfg.weight_decay) * theta
    } else {
        g
    }
}

fn apply_decoupled<T: Scalar>(theta: &mut T, decay: bool, cfg: &StepConfig) {
    if decay && cfg.decoupled && cfg.weight_decay != 0.0 {
        *theta -= T::lit(cfg.lr * cfg.weight_decay) * *theta;
    }
}

/// One Adam step. `mask[i]` selects the entries that receive weight decay
/// (all of them when `None`).
pub fn adam_step<T: Scalar>(
    theta: &mut [T],
    state: &mut AdamState<T>,
    grad: &[T],
    mask: Option<&[bool]>,
    cfg: &StepConfig,
) -> Result<()> {
    check(theta.len(), grad, mask)?;
    if state.m.len() != theta.len() {
        return Err(Error::Dimension("Adam state size mismatch".into()));
    }
    state.t += 1;
    let b1 = T::lit(ADAM_BETA1);
    let b2 = T::lit(ADAM_BETA2);
    let one = T::one();
    let t = state.t as i32;
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr = T::lit(cfg.lr);
    let eps = T::lit(ADAM_EPS);
    for i in 0..theta.len() {
        let decay = mask.is_none_or(|m| m[i]);
        let g = decayed(theta[i], grad[i], decay, cfg);
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        apply_decoupled(&mut theta[i], decay, cfg);
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// One heavy-ball step: `v ← m·v + g`, `θ ← θ − lr·v`.
pub fn sgd_momentum_step<T: Scalar>(
    theta: &mut [T],
    state: &mut SgdState<T>,
    grad: &[T],
    momentum: f64,
    mask: Option<&[bool]>,
    cfg: &StepConfig,
) -> Result<()> {
    check(theta.len(), grad, mask)?;
    if state.velocity.len() != theta.len() {
        return Err(Error::Dimension("momentum state size mismatch".into()));
    }
    let mu = T::lit(momentum);
    let lr = T::lit(cfg.lr);
    for i in 0..theta.len() {
        let decay = mask.is_none_or(|m| m[i]);
        let g = decayed(theta[i], grad[i], decay, cfg);
        state.velocity[i] = mu * state.velocity[i] + g;
        apply_decoupled(&mut theta[i], decay, cfg);
        theta[i] -= lr * state.velocity[i];
    }
    Ok(())
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer<T> {
    Adam(AdamState<T>),
    SgdMomentum { momentum: f64, state: SgdState<T> },
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, n: usize, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam(AdamState::new(n)),
            OptimizerKind::SgdMomentum => Self::SgdMomentum {
                momentum,
                state: SgdState::new(n),
            },
        }
    }

    pub fn step(&mut self, theta: &mut [T], grad: &[T], mask: Option<&[bool]>, cfg: &StepConfig) -> Result<()> {
        match self {
            Self::Adam(s) => adam_step(theta, s, grad, mask, cfg),
            Self::SgdMomentum { momentum, state } => sgd_momentum_step(theta, state, grad, *momentum, mask, cfg),
        }
    }
}

/// Learning rate after halving every `period` epochs (epochs counted from 1).
pub fn halved_lr(base: f64, period: Option<usize>, epoch: usize) -> f64 {
    match period {
        Some(p) if p > 0 => base * 0.5f64.powi((epoch.saturating_sub(1) / p) as i32),
        _ => base,
    }
}
