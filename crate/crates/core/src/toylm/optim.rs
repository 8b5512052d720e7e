use serde::{Deserialize, Serialize};

use super::model::ToyModelParams;
use crate::error::{invalid_arg, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdamLite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.9
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

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamLite,
            learning_rate,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::SgdMomentum, ..Self::adam(learning_rate) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid_arg(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        for (name, v) in [("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(invalid_arg(format!("{name} = {v} must lie in [0, 1)")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(invalid_arg("eps must be positive"));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(3e-3)
    }
}

/// Moment buffers and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step_count: u64,
    /// Velocity (SGD) or first moment (Adam).
    first: ToyModelParams,
    /// Second moment; Adam only.
    second: Option<ToyModelParams>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ToyModelParams) -> Result<Self> {
        config.validate()?;
        let second = match config.kind {
            OptimizerKind::AdamLite => Some(params.zeros_like()),
            OptimizerKind::SgdMomentum => None,
        };
        Ok(Self { config, step_count: 0, first: params.zeros_like(), second })
    }

    /// One update step, in place.
    ///
    /// SGD: `v ← μv + g; θ ← θ − lr·v`. Adam: bias-corrected moments.
    pub fn apply(&mut self, params: &mut ToyModelParams, grads: &ToyModelParams) -> Result<()> {
        params.check_shapes()?;
        grads.check_shapes()?;
        if !params.same_shape(grads) || !params.same_shape(&self.first) {
            return Err(Error::ShapeMismatch("parameters, gradients and optimizer buffers differ in shape".into()));
        }
        self.step_count += 1;
        let cfg = self.config;
        let lr = cfg.learning_rate;
        let ps = params.tensors_mut();
        let gs = grads.tensors();
        let ms = self.first.tensors_mut();
        match cfg.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, g), m) in ps.into_iter().zip(gs).zip(ms) {
                    for ((pi, gi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        *vi = cfg.momentum * *vi + gi;
                        *pi -= lr * *vi;
                    }
                }
            }
            OptimizerKind::AdamLite => {
                let vs = self.second.as_mut().expect("adam keeps a second moment").tensors_mut();
                let t = self.step_count as i32;
                let c1 = 1.0 - cfg.beta1.powi(t);
                let c2 = 1.0 - cfg.beta2.powi(t);
                for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
                    for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *pi -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
