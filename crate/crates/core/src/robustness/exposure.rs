use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ddpm_sample_from, forward_noise_with, initial_latent, EpsPredictor, NoiseSchedule,
    RespacingMap, ToyDataset,
};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub step_index: usize,
    pub timestep: usize,
    /// Mean `‖ε_θ‖²` on real data noised to this timestep.
    pub reference_sq_norm: f64,
    /// Mean `‖ε_θ‖²` along sampling trajectories at this step.
    pub sampling_sq_norm: f64,
    pub reference_stderr: f64,
    pub sampling_stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsNormProfile {
    pub rows: Vec<ProfileRow>,
    pub n: usize,
    /// Mean over steps of `|sampling − reference|`.
    pub gap: f64,
    /// Mean over steps of the per-step standard error of the difference.
    pub gap_stderr: f64,
    /// `sampling − reference` at the last (cleanest) step.
    pub end_signed_diff: f64,
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Compares `‖ε_θ‖²` on ground-truth noised inputs against the same quantity
/// along the model's own reverse trajectories, step by step.
pub fn exposure_profile(
    model: &dyn EpsPredictor,
    dataset: &ToyDataset,
    sched: &NoiseSchedule,
    respacing: &RespacingMap,
    rng: &Rng,
    n: usize,
) -> Result<EpsNormProfile> {
    if n == 0 {
        return Err(Error::Config("exposure profile needs n >= 1".into()));
    }
    let chain = respacing.chain(sched)?;

    let mut sampling: Vec<Vec<f64>> = Vec::with_capacity(chain.len());
    let latent = initial_latent(rng, n, model.dim());
    ddpm_sample_from(model, latent, sched, respacing, rng, |view| {
        sampling.push(view.eps.row_sq_norms());
    })?;

    let mut data_rng = rng.substream("reference-data");
    let x0 = dataset.sample(&mut data_rng, n);
    let mut rows = Vec::with_capacity(chain.len());
    for (k, step) in chain.iter().enumerate() {
        let eps = rng.substream_indexed("reference-noise", k as u64).gaussian(x0.shape().to_vec());
        let xt = forward_noise_with(&x0, step.alpha_bar, &eps)?;
        let pred = model.predict(&xt, step.timestep)?;
        let (reference_sq_norm, reference_stderr) = mean_and_stderr(&pred.row_sq_norms());
        let (sampling_sq_norm, sampling_stderr) = mean_and_stderr(&sampling[k]);
        if !(reference_sq_norm.is_finite() && sampling_sq_norm.is_finite()) {
            return Err(Error::SamplingDivergence {
                step: k,
                timestep: step.timestep,
            });
        }
        rows.push(ProfileRow {
            step_index: k,
            timestep: step.timestep,
            reference_sq_norm,
            sampling_sq_norm,
            reference_stderr,
            sampling_stderr,
        });
    }
    let steps = rows.len() as f64;
    let gap = rows
        .iter()
        .map(|r| (r.sampling_sq_norm - r.reference_sq_norm).abs())
        .sum::<f64>()
        / steps;
    let gap_stderr = rows
        .iter()
        .map(|r| r.sampling_stderr.hypot(r.reference_stderr))
        .sum::<f64>()
        / steps;
    let last = rows.last().expect("non-empty chain");
    let end_signed_diff = last.sampling_sq_norm - last.reference_sq_norm;
    Ok(EpsNormProfile {
        rows,
        n,
        gap,
        gap_stderr,
        end_signed_diff,
    })
}

pub fn write_profile_csv(profile: &EpsNormProfile, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "step_index,timestep,reference_sq_norm,sampling_sq_norm")?;
    for r in &profile.rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.step_index, r.timestep, r.reference_sq_norm, r.sampling_sq_norm
        )?;
    }
    Ok(())
}
