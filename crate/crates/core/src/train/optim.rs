//! AdamW with decoupled weight decay, and plain SGD.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamId, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adamw { lr: f64, betas: (f64, f64), weight_decay: f64 },
    Sgd { lr: f64 },
}

impl OptimizerConfig {
    pub fn adamw(lr: f64) -> Self {
        Self::Adamw {
            lr,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::Adamw { lr, .. } | Self::Sgd { lr } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and nonnegative, got {lr}")));
        }
        if let Self::Adamw { betas, weight_decay, .. } = *self {
            for b in [betas.0, betas.1] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::Config(format!("betas must lie in [0, 1), got {b}")));
                }
            }
            if !(weight_decay >= 0.0) {
                return Err(Error::Config(format!("weight decay must be nonnegative, got {weight_decay}")));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

/// One AdamW update: `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
pub fn adamw_step(params: &mut Params, grads: &Gradients, state: &mut AdamState, lr: f64, betas: (f64, f64), weight_decay: f64) {
    state.step += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        let (m, v) = state
            .moments
            .entry(id)
            .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        let p = params.get_mut(id).data_mut();
        for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * *p);
        }
    }
}

/// `p ← p − lr·g`.
pub fn sgd_step(params: &mut Params, grads: &Gradients, lr: f64) {
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        for (p, g) in params.get_mut(id).data_mut().iter_mut().zip(g.data()) {
            *p -= lr * g;
        }
    }
}

/// An optimizer together with its running state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub state: AdamState,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: AdamState::default(),
        })
    }

    pub fn step(&mut self, params: &mut Params, grads: &Gradients) {
        match self.cfg {
            OptimizerConfig::Adamw { lr, betas, weight_decay } => adamw_step(params, grads, &mut self.state, lr, betas, weight_decay),
            OptimizerConfig::Sgd { lr } => sgd_step(params, grads, lr),
        }
    }
}
