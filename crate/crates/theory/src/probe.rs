use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TheoryError};
use crate::gaussian::{perturbed_gaussian, PerturbedGaussian};
use crate::perturbation::{exponent_gradient, AdmissibleSampler, Perturbation};
use crate::rf::RandomFeatureScoreModel;

/// `n` admissible perturbations in the ball and the Gaussians they induce.
/// A zero radius yields the single unperturbed member.
pub fn perturbed_set_probe(
    w: &DMatrix<f64>,
    u: &DMatrix<f64>,
    e: &DVector<f64>,
    radius: f64,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(Perturbation, PerturbedGaussian)>> {
    if n == 0 {
        return Err(TheoryError::Invalid("probe needs n >= 1".into()));
    }
    let (d, m) = w.shape();
    if radius == 0.0 {
        return Ok(vec![(Perturbation::zeros(d, m), PerturbedGaussian::standard(d))]);
    }
    let sampler = AdmissibleSampler::new(w)?;
    (0..n)
        .map(|_| {
            let delta = sampler.sample(rng, radius, 1000)?;
            let g = perturbed_gaussian(&delta, w, u, e)?;
            Ok((delta, g))
        })
        .collect()
}

/// Least-squares fit of `θ` to the standard normal score on `xs`, with a
/// small ridge term.
pub fn fit_to_standard_normal(model: &RandomFeatureScoreModel, xs: &[DVector<f64>]) -> Result<RandomFeatureScoreModel> {
    let (d, m) = (model.d(), model.m());
    let mut gram = DMatrix::<f64>::identity(m, m) * 1e-8;
    let mut cross = DMatrix::<f64>::zeros(d, m);
    for x in xs {
        let phi = model.features(x);
        gram += &phi * phi.transpose();
        cross -= x * phi.transpose();
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| TheoryError::Invalid("feature Gram matrix is singular".into()))?;
    // θ/m · Φ ≈ −X  ⇒  θ = m · cross · gram⁻¹
    let theta = chol.solve(&cross.transpose()).transpose() * m as f64;
    model.with_theta(theta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpread {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl LossSpread {
    fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            n: v.len(),
            mean,
            std: var.sqrt(),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub radius: f64,
    pub outside_radius: f64,
    /// Score-matching loss of the fitted model against members of the set.
    pub in_set: LossSpread,
    /// The same against Gaussians induced from a larger ball.
    pub out_of_set: LossSpread,
}

/// Mean over `xs` of `‖s_θ(x) − ∇log p̂(x)‖²` for each perturbed prior, inside
/// the ball and in a shell `outside_factor` times larger. Reported, not
/// asserted: exact constancy inside the ball is not expected of a smooth model.
pub fn flat_set_probe<R: Rng>(
    model: &RandomFeatureScoreModel,
    radius: f64,
    outside_factor: f64,
    n: usize,
    xs: &[DVector<f64>],
    rng: &mut R,
) -> Result<ProbeReport> {
    let (w, u, e) = (model.w(), model.u(), model.e());
    let loss_under = |delta: &Perturbation| -> Result<f64> {
        let mut s = 0.0;
        for x in xs {
            let grad_log_p_hat = -x - exponent_gradient(x, delta, w, u, e)?;
            s += (model.score(x) - grad_log_p_hat).norm_squared();
        }
        Ok(s / xs.len() as f64)
    };
    let loss_spread = |r: f64, rng: &mut R| -> Result<LossSpread> {
        let members = perturbed_set_probe(w, u, e, r, n, rng)?;
        let losses = members
            .iter()
            .map(|(d, _)| loss_under(d))
            .collect::<Result<Vec<_>>>()?;
        Ok(LossSpread::of(&losses))
    };
    let outside_radius = radius * outside_factor;
    Ok(ProbeReport {
        radius,
        outside_radius,
        in_set: loss_spread(radius, rng)?,
        out_of_set: loss_spread(outside_radius, rng)?,
    })
}
