use crate::error::Result;
use crate::numerics::ParamVector;

use super::{base_step, OptimConfig, OptimizerState};

#[derive(Clone, Debug)]
pub struct SamOutcome {
    pub params: ParamVector,
    /// Loss at the un-perturbed point.
    pub loss: f64,
    /// True when the ascent was skipped because `‖∇L(w)‖ = 0`.
    pub ascent_skipped: bool,
}

/// Sharpness-aware step: ascend to `ŵ = w + ρ·∇L(w)/‖∇L(w)‖`, then apply the
/// base optimizer to `w` with the gradient taken at `ŵ`.
///
/// `loss_grad` must evaluate the same minibatch on every call. With `ρ = 0`
/// the closure is called once and the result is exactly [`base_step`].
pub fn sam_step<F>(
    mut loss_grad: F,
    params: &ParamVector,
    cfg: &OptimConfig,
    state: &mut OptimizerState,
) -> Result<SamOutcome>
where
    F: FnMut(&ParamVector) -> Result<(f64, ParamVector)>,
{
    let (loss, g) = loss_grad(params)?;
    if cfg.sam_rho == 0.0 {
        let params = base_step(params, &g, cfg, state)?;
        return Ok(SamOutcome {
            params,
            loss,
            ascent_skipped: false,
        });
    }
    let norm = g.norm();
    if norm == 0.0 {
        state.sam_skips += 1;
        let params = base_step(params, &g, cfg, state)?;
        return Ok(SamOutcome {
            params,
            loss,
            ascent_skipped: true,
        });
    }
    let ascended = params.add_scaled(cfg.sam_rho / norm, &g)?;
    let (_, g_hat) = loss_grad(&ascended)?;
    let params = base_step(params, &g_hat, cfg, state)?;
    Ok(SamOutcome {
        params,
        loss,
        ascent_skipped: false,
    })
}
