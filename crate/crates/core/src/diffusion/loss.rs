use crate::error::{Error, Result};
use crate::numerics::{Graph, Mat, NodeId, Rng, Tensor};

use super::model::{Architecture, EpsModel, EpsPredictor};
use super::schedule::NoiseSchedule;

/// One draw of the simplified ε-matching objective: timesteps, regression
/// targets and the (possibly input-perturbed) model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedBatch {
    pub timesteps: Vec<usize>,
    /// Regression target ε.
    pub eps: Tensor,
    /// Model input: x0 noised with `ε + ip_strength·ξ`.
    pub inputs: Tensor,
}

impl NoisedBatch {
    /// `t ~ U{1..T}`, `ε, ξ ~ N(0, I)`; ξ is only drawn when `ip_strength > 0`.
    pub fn draw(x0: &Tensor, sched: &NoiseSchedule, rng: &mut Rng, ip_strength: f64) -> Result<Self> {
        if x0.rows() == 0 || x0.is_empty() {
            return Err(Error::Config("diffusion loss over an empty batch".into()));
        }
        if !(ip_strength >= 0.0) {
            return Err(Error::Config(format!(
                "input perturbation strength must be >= 0, got {ip_strength}"
            )));
        }
        let n = x0.rows();
        let timesteps: Vec<usize> = (0..n).map(|_| 1 + rng.below(sched.steps())).collect();
        let eps = rng.gaussian(x0.shape().to_vec());
        let xi = (ip_strength > 0.0).then(|| rng.gaussian(x0.shape().to_vec()));
        let mut inputs = x0.clone();
        for (i, &t) in timesteps.iter().enumerate() {
            let ab = sched.alpha_bar(t)?;
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let erow = eps.row(i);
            let xirow = xi.as_ref().map(|x| x.row(i));
            for (j, v) in inputs.row_mut(i).iter_mut().enumerate() {
                let mut noise = erow[j] as f64;
                if let Some(xr) = xirow {
                    noise += ip_strength * xr[j] as f64;
                }
                *v = (a * *v as f64 + b * noise) as f32;
            }
        }
        Ok(Self {
            timesteps,
            eps,
            inputs,
        })
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// Mean over rows of `‖pred − ε‖²`.
    pub fn loss_of(&self, pred: &Tensor) -> Result<f64> {
        pred.same_shape(&self.eps)?;
        let total: f64 = pred
            .data()
            .iter()
            .zip(self.eps.data())
            .map(|(&p, &e)| {
                let d = p as f64 - e as f64;
                d * d
            })
            .sum();
        Ok(total / self.len() as f64)
    }

    /// Graph of the batch loss for an [`EpsModel`] architecture.
    pub fn loss_graph(&self, arch: &Architecture, g: &mut Graph) -> Result<NodeId> {
        let x = g.constant(Mat::from_tensor(&self.inputs));
        let pred = EpsModel::forward(arch, g, x, &self.timesteps)?;
        let target = g.constant(Mat::from_tensor(&self.eps));
        g.mse(pred, target)
    }
}

/// Monte-Carlo estimate of the ε-matching loss on `x0`.
pub fn diffusion_loss(
    model: &dyn EpsPredictor,
    x0: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    ip_strength: f64,
) -> Result<f64> {
    let batch = NoisedBatch::draw(x0, sched, rng, ip_strength)?;
    let pred = model.predict_rows(&batch.inputs, &batch.timesteps)?;
    batch.loss_of(&pred)
}
