use crate::error::{Error, Result};
use crate::numerics::{ParamAccumulator, ParamVector};

use super::OptimConfig;

/// Running SWA mean and EMA accumulator, both kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct AveragerState {
    pub swa: ParamAccumulator,
    pub n_models: u64,
    pub ema: ParamAccumulator,
}

impl AveragerState {
    /// Both averages start at the initial weights.
    pub fn new(initial: &ParamVector) -> Self {
        Self {
            swa: ParamAccumulator::from_params(initial),
            n_models: 0,
            ema: ParamAccumulator::from_params(initial),
        }
    }

    /// Absorbs `w` into the SWA mean when `step >= swa_start` and `step` is a
    /// multiple of the cycle length; returns whether it did.
    pub fn swa_update(&mut self, w: &ParamVector, step: u64, cfg: &OptimConfig) -> Result<bool> {
        if step < cfg.swa_start || step % cfg.swa_cycle.max(1) != 0 {
            return Ok(false);
        }
        self.swa.ensure_matches(w)?;
        let n = self.n_models as f64;
        for (acc, &v) in self.swa.values_mut().iter_mut().zip(w.values()) {
            *acc = (*acc * n + v as f64) / (n + 1.0);
        }
        self.n_models += 1;
        Ok(true)
    }

    /// `w_ema ← (1 − λ)·w_ema + λ·w`.
    pub fn ema_update(&mut self, w: &ParamVector, lambda: f64) -> Result<()> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::Config(format!("EMA lambda must lie in (0, 1], got {lambda}")));
        }
        self.ema.ensure_matches(w)?;
        for (acc, &v) in self.ema.values_mut().iter_mut().zip(w.values()) {
            *acc = (1.0 - lambda) * *acc + lambda * v as f64;
        }
        Ok(())
    }

    pub fn swa_params(&self) -> ParamVector {
        self.swa.to_params()
    }

    pub fn ema_params(&self) -> ParamVector {
        self.ema.to_params()
    }
}

/// Snapshots taken during training, in strictly increasing step order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointSeries {
    entries: Vec<(u64, ParamVector)>,
}

impl CheckpointSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: u64, params: ParamVector) -> Result<()> {
        if let Some((last, first)) = self.entries.last().map(|(s, _)| *s).zip(self.entries.first()) {
            if step <= last {
                return Err(Error::Config(format!(
                    "checkpoint steps must increase: {step} after {last}"
                )));
            }
            first.1.ensure_same_layout(&params)?;
        }
        self.entries.push((step, params));
        Ok(())
    }

    pub fn entries(&self) -> &[(u64, ParamVector)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Power-function EMA over a checkpoint series:
/// `θ̂(t) = β(t)·θ̂(t−1) + (1 − β(t))·θ(t)` with `β(t) = (1 − 1/t)^(γ+1)`,
/// `t` counting checkpoints from 1.
pub fn posthoc_ema(series: &CheckpointSeries, gamma: f64) -> Result<ParamAccumulator> {
    let Some((_, first)) = series.entries.first() else {
        return Err(Error::Config("post-hoc EMA needs at least one checkpoint".into()));
    };
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("post-hoc EMA gamma must be >= 0, got {gamma}")));
    }
    let mut acc = ParamAccumulator::zeros(first.layout().clone());
    for (i, (_, theta)) in series.entries.iter().enumerate() {
        let t = (i + 1) as f64;
        let beta = (1.0 - 1.0 / t).powf(gamma + 1.0);
        for (a, &v) in acc.values_mut().iter_mut().zip(theta.values()) {
            *a = beta * *a + (1.0 - beta) * v as f64;
        }
    }
    Ok(acc)
}
