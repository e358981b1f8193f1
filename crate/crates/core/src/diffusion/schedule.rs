use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// β, α and ᾱ tables, indexed by timestep `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Serializable recipe for a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleDescriptor {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleDescriptor {
    /// Standard 1000-step linear schedule rescaled to `steps` so that the
    /// chain still ends near pure noise.
    pub fn scaled_linear(steps: usize) -> Self {
        let scale = 1000.0 / steps as f64;
        Self {
            steps,
            beta_start: 1e-4 * scale,
            beta_end: 0.02 * scale,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleDescriptor {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// β linearly interpolated from `beta_1` to `beta_t`, endpoints inclusive.
pub fn linear_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(Error::Config(format!(
            "schedule bounds must satisfy 0 < beta_1 <= beta_T < 1, got {beta_1} and {beta_t}"
        )));
    }
    let beta = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_1
            } else {
                beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            Err(Error::Index {
                what: "timestep",
                index: t,
                max: self.steps(),
            })
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Strictly increasing subsequence of `1..=T` ending at `T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RespacingMap {
    indices: Vec<usize>,
}

impl RespacingMap {
    /// `T'` evenly spaced timesteps: `round(k * T / T')` for `k = 1..=T'`.
    pub fn even(total: usize, t_prime: usize) -> Result<Self> {
        if t_prime == 0 || t_prime > total {
            return Err(Error::Config(format!(
                "respacing to {t_prime} steps is invalid for a {total}-step schedule"
            )));
        }
        let indices = (1..=t_prime)
            .map(|k| (2 * k * total + t_prime) / (2 * t_prime))
            .collect();
        Self::from_indices(indices, total)
    }

    pub fn full(total: usize) -> Self {
        Self {
            indices: (1..=total).collect(),
        }
    }

    pub fn from_indices(indices: Vec<usize>, total: usize) -> Result<Self> {
        let increasing = indices.windows(2).all(|w| w[0] < w[1]);
        if indices.is_empty() || !increasing || indices[0] == 0 || *indices.last().unwrap() != total {
            return Err(Error::Config(format!(
                "respacing indices must strictly increase within 1..={total} and end at {total}"
            )));
        }
        Ok(Self { indices })
    }

    pub fn t_prime(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn validate_for(&self, sched: &NoiseSchedule) -> Result<()> {
        if *self.indices.last().unwrap() != sched.steps() {
            return Err(Error::Config(format!(
                "respacing ends at {} but the schedule has {} steps",
                self.indices.last().unwrap(),
                sched.steps()
            )));
        }
        Ok(())
    }

    /// Reverse-chain coefficients, ordered from the noisiest step down.
    pub fn chain(&self, sched: &NoiseSchedule) -> Result<Vec<ChainStep>> {
        self.validate_for(sched)?;
        let mut out = Vec::with_capacity(self.indices.len());
        for k in (0..self.indices.len()).rev() {
            let t = self.indices[k];
            let alpha_bar = sched.alpha_bar(t)?;
            let alpha_bar_prev = if k == 0 {
                1.0
            } else {
                sched.alpha_bar(self.indices[k - 1])?
            };
            let beta = 1.0 - alpha_bar / alpha_bar_prev;
            let posterior_variance = if k == 0 {
                0.0
            } else {
                beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
            };
            out.push(ChainStep {
                timestep: t,
                alpha_bar,
                alpha_bar_prev,
                beta,
                posterior_variance,
            });
        }
        Ok(out)
    }
}

/// Effective coefficients of one retained reverse step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainStep {
    pub timestep: usize,
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
    pub beta: f64,
    pub posterior_variance: f64,
}

/// `√ᾱ·x0 + √(1−ᾱ)·eps` for an explicit ᾱ.
pub fn forward_noise_with(x0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    x0.same_shape(eps)?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    forward_noise_with(x0, sched.alpha_bar(t)?, eps)
}
