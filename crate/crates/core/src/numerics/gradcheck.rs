//! Central finite-difference gradient checker.

use crate::error::Result;

use super::autodiff::{eval_loss, grad, Graph, NodeId};
use super::ParamVector;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-component relative error.
    pub max_rel_err: f64,
    /// Flat index of the component attaining it.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient with central differences of step `h`.
///
/// Perturbed points are rounded to the 32-bit parameter grid and the
/// difference quotient divides by the realised step. The relative error of a
/// component is `|a - n| / max(|a|, |n|, 0.01 * max_j |n_j|)`, so components
/// that are tiny compared with the overall gradient are judged on an
/// absolute scale.
pub fn check_gradient<F>(params: &ParamVector, build: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let (_, g) = grad(params, &build)?;
    let analytic: Vec<f64> = g.values().iter().map(|&v| v as f64).collect();
    let mut numeric = Vec::with_capacity(params.len());
    let mut probe = params.clone();
    for i in 0..params.len() {
        let w = params.values()[i] as f64;
        let plus = (w + h) as f32;
        let minus = (w - h) as f32;
        probe.values_mut()[i] = plus;
        let lp = eval_loss(&probe, &build)?;
        probe.values_mut()[i] = minus;
        let lm = eval_loss(&probe, &build)?;
        probe.values_mut()[i] = params.values()[i];
        numeric.push((lp - lm) / (plus as f64 - minus as f64));
    }
    let floor = 0.01 * numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (mut max_rel_err, mut worst_index) = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(floor);
        if denom == 0.0 {
            continue;
        }
        let rel = (a - n).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}
