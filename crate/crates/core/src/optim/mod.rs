//! Descent steps (SGD, Adam), sharpness-aware minimization, and the weight
//! averagers: SWA, EMA and post-hoc power-function EMA.

mod averaging;
mod sam;

pub use averaging::{posthoc_ema, AveragerState, CheckpointSeries};
pub use sam::{sam_step, SamOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamAccumulator, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseOptimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: BaseOptimizer,
    pub lr: f64,
    /// SAM radius; 0 disables the ascent step.
    pub sam_rho: f64,
    pub swa_cycle: u64,
    pub swa_start: u64,
    /// EMA weight of the newest parameters.
    pub ema_lambda: f64,
    pub ip_strength: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: BaseOptimizer::Adam,
            lr: 1e-4,
            sam_rho: 0.0,
            swa_cycle: 100,
            swa_start: 0,
            ema_lambda: 1e-4,
            ip_strength: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.sam_rho >= 0.0) {
            return bad(format!("SAM radius must be >= 0, got {}", self.sam_rho));
        }
        if self.swa_cycle < 1 {
            return bad("SWA cycle length must be >= 1".into());
        }
        if !(self.ema_lambda > 0.0 && self.ema_lambda <= 1.0) {
            return bad(format!("EMA lambda must lie in (0, 1], got {}", self.ema_lambda));
        }
        if !(self.ip_strength >= 0.0) {
            return bad(format!("IP strength must be >= 0, got {}", self.ip_strength));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Learning rate for a step. Constant; the cyclic schedule that SWA is
    /// sometimes paired with would hook in here.
    pub fn lr_at(&self, _step: u64) -> f64 {
        self.lr
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParamAccumulator,
    pub v: ParamAccumulator,
    /// Number of SAM steps whose ascent was skipped for a zero gradient.
    pub sam_skips: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamVector) -> Self {
        Self {
            step: 0,
            m: ParamAccumulator::zeros(params.layout().clone()),
            v: ParamAccumulator::zeros(params.layout().clone()),
            sam_skips: 0,
        }
    }
}

/// One SGD or Adam update.
pub fn base_step(
    params: &ParamVector,
    gradient: &ParamVector,
    cfg: &OptimConfig,
    state: &mut OptimizerState,
) -> Result<ParamVector> {
    params.ensure_same_layout(gradient)?;
    state.m.ensure_matches(params)?;
    if let Some(seg) = gradient.first_non_finite_segment() {
        return Err(Error::numeric("gradient", seg));
    }
    state.step += 1;
    let lr = cfg.lr_at(state.step);
    let mut out = params.clone();
    match cfg.kind {
        BaseOptimizer::Sgd => {
            for (w, &g) in out.values_mut().iter_mut().zip(gradient.values()) {
                *w = (*w as f64 - lr * g as f64) as f32;
            }
        }
        BaseOptimizer::Adam => {
            let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
            let c1 = 1.0 - b1.powi(state.step as i32);
            let c2 = 1.0 - b2.powi(state.step as i32);
            let m = state.m.values_mut();
            let v = state.v.values_mut();
            for (i, (w, &g)) in out.values_mut().iter_mut().zip(gradient.values()).enumerate() {
                let g = g as f64;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
                *w = (*w as f64 - lr * update) as f32;
            }
        }
    }
    Ok(out)
}
