//! Momentum SGD and AdamW, both with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// SGD only.
    #[serde(default)]
    pub momentum: f64,
    /// AdamW only.
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerSpec {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay,
            momentum,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            lr,
            weight_decay,
            momentum: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let bad = |name: &str, reason: String| Err(Error::invalid(format!("{field}.{name}"), reason));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("{} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} is outside [0, 1)", self.momentum));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", format!("{} is outside [0, 1)", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", format!("{} is outside [0, 1)", self.beta2));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps", format!("{} must be positive", self.eps));
        }
        Ok(())
    }
}

/// Auxiliary buffers for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamState {
    Sgd { velocity: Vec<f64> },
    Adamw { m: Vec<f64>, v: Vec<f64>, step: u64 },
}

impl ParamState {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => ParamState::Sgd {
                velocity: vec![0.0; len],
            },
            OptimizerKind::Adamw => ParamState::Adamw {
                m: vec![0.0; len],
                v: vec![0.0; len],
                step: 0,
            },
        }
    }

    fn len(&self) -> usize {
        match self {
            ParamState::Sgd { velocity } => velocity.len(),
            ParamState::Adamw { m, .. } => m.len(),
        }
    }
}

/// One update of `param` from `grad`. `decay` selects whether decoupled
/// weight decay applies (weights yes, biases no).
///
/// * SGD: `v ← μv + g`, `θ ← θ − lr·v − lr·wd·θ`.
/// * AdamW: bias-corrected moments `m̂, v̂`, `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)`.
pub fn optimizer_step(
    spec: &OptimizerSpec,
    state: &mut ParamState,
    param: &mut Tensor,
    grad: &Tensor,
    decay: bool,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dim("optimizer_step", param.shape(), grad.shape()));
    }
    if state.len() != param.len() {
        return Err(Error::dim("optimizer_step", param.shape(), &[state.len()]));
    }
    let lr = spec.lr;
    let wd = if decay { spec.weight_decay } else { 0.0 };
    match state {
        ParamState::Sgd { velocity } => {
            let mu = spec.momentum;
            for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.iter_mut()) {
                *v = mu * *v + g;
                let shrink = lr * wd * *p;
                *p = *p - lr * *v - shrink;
            }
        }
        ParamState::Adamw { m, v, step } => {
            *step += 1;
            let (b1, b2) = (spec.beta1, spec.beta2);
            let c1 = 1.0 - b1.powf(*step as f64);
            let c2 = 1.0 - b2.powf(*step as f64);
            for (((p, &g), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * (m_hat / (v_hat.sqrt() + spec.eps) + wd * *p);
            }
        }
    }
    Ok(())
}

/// An optimizer with lazily created per-parameter state, keyed by a stable
/// parameter id.
#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimizerSpec,
    states: BTreeMap<usize, ParamState>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Self {
            spec,
            states: BTreeMap::new(),
        }
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn step(&mut self, id: usize, param: &mut Tensor, grad: &Tensor, decay: bool) -> Result<()> {
        let kind = self.spec.kind;
        let state = self
            .states
            .entry(id)
            .or_insert_with(|| ParamState::new(kind, param.len()));
        optimizer_step(&self.spec, state, param, grad, decay)
    }

    pub fn state(&self, id: usize) -> Option<&ParamState> {
        self.states.get(&id)
    }
}
