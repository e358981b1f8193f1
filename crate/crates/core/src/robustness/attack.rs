use serde::{Deserialize, Serialize};

use crate::diffusion::{EpsPredictor, NoiseSchedule, RespacingMap};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Projected gradient ascent on the initial latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Per-sample perturbation budget in units of `√d`.
    pub strength: f64,
    pub steps: usize,
    /// Ascent step length as a fraction of the budget.
    pub step_fraction: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            strength: 1.0,
            steps: 10,
            step_fraction: 0.1,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::Config(format!("attack strength must be >= 0, got {}", self.strength)));
        }
        if !(self.step_fraction > 0.0) {
            return Err(Error::Config("attack step fraction must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over samples of `‖ε_θ(z, t_first) − z‖²`: the noise-matching loss at
/// the first reverse step, where the latent itself plays the role of the
/// noise because `ᾱ_T ≈ 0`.
pub fn latent_attack_loss(
    model: &dyn EpsPredictor,
    sched: &NoiseSchedule,
    respacing: &RespacingMap,
    latents: &Tensor,
) -> Result<f64> {
    let t = respacing.chain(sched)?[0].timestep;
    let pred = model.predict(latents, t)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(latents.data())
        .map(|(&p, &z)| (p as f64 - z as f64).powi(2))
        .sum();
    Ok(s / latents.rows().max(1) as f64)
}

/// Raises [`latent_attack_loss`] by normalized per-sample gradient ascent,
/// keeping each row within `strength·√d` of its starting point. With zero
/// strength the latents are returned unchanged.
pub fn latent_attack(
    model: &dyn EpsPredictor,
    sched: &NoiseSchedule,
    respacing: &RespacingMap,
    cfg: &AttackConfig,
    latents: &Tensor,
) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.strength == 0.0 || cfg.steps == 0 {
        return Ok(latents.clone());
    }
    let t = respacing.chain(sched)?[0].timestep;
    let d = latents.cols();
    let budget = cfg.strength * (d as f64).sqrt();
    let step_len = cfg.step_fraction * budget;
    let mut z = latents.clone();
    for step in 0..cfg.steps {
        let pred = model.predict(&z, t)?;
        let mut resid = pred.clone();
        for (r, &v) in resid.data_mut().iter_mut().zip(z.data()) {
            *r -= v;
        }
        // ∇_z ‖ε_θ(z) − z‖² = 2·(Jᵀr − r)
        let (_, jtr) = model.predict_vjp(&z, t, &resid)?;
        for i in 0..z.rows() {
            let g: Vec<f64> = jtr
                .row(i)
                .iter()
                .zip(resid.row(i))
                .map(|(&a, &r)| 2.0 * (a as f64 - r as f64))
                .collect();
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !gn.is_finite() {
                return Err(Error::AttackDivergence { step });
            }
            if gn == 0.0 {
                continue;
            }
            let base = latents.row(i);
            let mut delta: Vec<f64> = z
                .row(i)
                .iter()
                .zip(base)
                .zip(&g)
                .map(|((&zi, &b), &gi)| zi as f64 - b as f64 + step_len * gi / gn)
                .collect();
            let dn = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if dn > budget {
                delta.iter_mut().for_each(|v| *v *= budget / dn);
            }
            for ((zi, &b), dv) in z.row_mut(i).iter_mut().zip(base).zip(delta) {
                *zi = (b as f64 + dv) as f32;
            }
        }
        if !z.is_finite() {
            return Err(Error::AttackDivergence { step });
        }
    }
    Ok(z)
}
