use std::io::Write;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

use super::model::EpsPredictor;
use super::schedule::{NoiseSchedule, RespacingMap};

/// What the sampler exposes at each reverse step.
pub struct StepView<'a> {
    /// 0 for the noisiest retained step.
    pub step_index: usize,
    pub timestep: usize,
    /// Model input at this step.
    pub x: &'a Tensor,
    pub eps: &'a Tensor,
}

/// Initial latent `x_T ~ N(0, I)` drawn from the `latent` sub-stream.
pub fn initial_latent(rng: &Rng, n: usize, dim: usize) -> Tensor {
    rng.substream("latent").gaussian(vec![n, dim])
}

/// Ancestral DDPM sampling of `n` points through the respaced chain.
pub fn ddpm_sample(
    model: &dyn EpsPredictor,
    n: usize,
    sched: &NoiseSchedule,
    respacing: &RespacingMap,
    rng: &Rng,
) -> Result<Tensor> {
    let latent = initial_latent(rng, n, model.dim());
    ddpm_sample_from(model, latent, sched, respacing, rng, |_| {})
}

/// Runs the reverse chain from an explicit `x_T`. Per-step noise comes from
/// `rng`'s indexed `step` sub-streams, so two calls with the same `rng` share
/// their noise.
pub fn ddpm_sample_from(
    model: &dyn EpsPredictor,
    latent: Tensor,
    sched: &NoiseSchedule,
    respacing: &RespacingMap,
    rng: &Rng,
    mut observe: impl FnMut(StepView<'_>),
) -> Result<Tensor> {
    let chain = respacing.chain(sched)?;
    let mut x = latent;
    for (k, step) in chain.iter().enumerate() {
        let eps = model.predict(&x, step.timestep)?;
        observe(StepView {
            step_index: k,
            timestep: step.timestep,
            x: &x,
            eps: &eps,
        });
        let eps_coef = step.beta / (1.0 - step.alpha_bar).sqrt();
        let inv_sqrt_alpha = 1.0 / (1.0 - step.beta).sqrt();
        let sigma = step.posterior_variance.sqrt();
        let mut noise_rng = rng.substream_indexed("step", k as u64);
        for (v, &e) in x.data_mut().iter_mut().zip(eps.data()) {
            let mean = inv_sqrt_alpha * (*v as f64 - eps_coef * e as f64);
            let z = if sigma > 0.0 { noise_rng.normal() } else { 0.0 };
            *v = (mean + sigma * z) as f32;
        }
        if !x.is_finite() {
            return Err(Error::SamplingDivergence {
                step: k,
                timestep: step.timestep,
            });
        }
    }
    Ok(x)
}

/// CSV dump with header `sample_id,dim0,dim1,...`.
pub fn write_samples_csv(samples: &Tensor, out: &mut impl Write) -> std::io::Result<()> {
    let header: Vec<String> = (0..samples.cols()).map(|j| format!("dim{j}")).collect();
    writeln!(out, "sample_id,{}", header.join(","))?;
    for i in 0..samples.rows() {
        let vals: Vec<String> = samples.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{i},{}", vals.join(","))?;
    }
    Ok(())
}
