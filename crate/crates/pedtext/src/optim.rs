//! Adam / AdamW with per-group learning rates and linear warmup.

use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Mat, Var};
use crate::error::{Error, Result};
use crate::model::{ParamGroup, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Decoupled weight decay.
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Learning rate per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRates {
    pub visual: f64,
    pub text: f64,
    pub head: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            visual: lr,
            text: lr,
            head: lr,
        }
    }

    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Visual => self.visual,
            ParamGroup::Text => self.text,
            ParamGroup::Head => self.head,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            visual: self.visual * factor,
            text: self.text * factor,
            head: self.head * factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for lr in [self.visual, self.text, self.head] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate must be finite and ≥ 0, got {lr}")));
            }
        }
        Ok(())
    }
}

/// Multiplier for `step` (0-based) of `total`: rises linearly over the
/// first `fraction` of steps, then stays at 1.
pub fn warmup_factor(step: usize, total: usize, fraction: f64) -> f64 {
    let warm = (total as f64 * fraction).ceil() as usize;
    if warm == 0 || step >= warm {
        1.0
    } else {
        (step + 1) as f64 / warm as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| Mat::zeros(p.value.dim())).collect();
        Self {
            config,
            state: OptimizerState {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    pub fn from_state(config: OptimizerConfig, state: OptimizerState, params: &ParamSet) -> Result<Self> {
        let ok = state.m.len() == params.len()
            && state.v.len() == params.len()
            && params
                .iter()
                .zip(state.m.iter().zip(&state.v))
                .all(|(p, (m, v))| m.dim() == p.value.dim() && v.dim() == p.value.dim());
        if !ok {
            return Err(Error::Validation("optimizer state does not match the parameters".into()));
        }
        Ok(Self { config, state })
    }

    /// Applies one update. `vars[i]` must be the tape leaf of parameter `i`.
    pub fn step(&mut self, params: &mut ParamSet, vars: &[Var], grads: &Grads, rates: &GroupRates) {
        let c = &self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, &var) in vars.iter().enumerate().take(params.len()) {
            let Some(g) = grads.get(var) else { continue };
            let lr = rates.get(params.get(i).group);
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let decay = if c.kind == OptimizerKind::AdamW { c.weight_decay } else { 0.0 };
            let w = params.value_mut(i);
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + c.eps);
                *w -= lr * (update + decay * *w);
            });
        }
    }
}
