use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Graph, Layout, Mat, NodeId, ParamVector, Rng, Tensor};

use super::schedule::NoiseSchedule;

/// Anything that predicts the noise component of a noised batch.
pub trait EpsPredictor {
    fn dim(&self) -> usize;

    /// Predictions for `x: [n, d]` where row `i` sits at timestep `ts[i]`.
    fn predict_rows(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor>;

    /// `(ε̂(x), Jᵀ·upstream)` for a batch at a shared timestep, where `J` is
    /// the row-wise Jacobian of the prediction with respect to its input.
    fn predict_vjp(&self, x: &Tensor, t: usize, upstream: &Tensor) -> Result<(Tensor, Tensor)>;

    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.predict_rows(x, &vec![t; x.rows()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Silu,
    Relu,
}

impl From<ActivationKind> for Activation {
    fn from(k: ActivationKind) -> Self {
        match k {
            ActivationKind::Silu => Activation::Silu,
            ActivationKind::Relu => Activation::Relu,
        }
    }
}

/// MLP over `[x | emb(t)]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: ActivationKind,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden: vec![64, 64, 64],
            embed_dim: 32,
            activation: ActivationKind::Silu,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(
                "timestep embedding dimension must be a positive even number".into(),
            ));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.dim + self.embed_dim);
        w.extend(&self.hidden);
        w.push(self.dim);
        w
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `layer{i}.weight: [in, out]`, `layer{i}.bias: [out]`, in layer order.
    pub fn layout(&self) -> Layout {
        let widths = self.widths();
        let mut parts = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            parts.push((format!("layer{i}.weight"), vec![pair[0], pair[1]]));
            parts.push((format!("layer{i}.bias"), vec![pair[1]]));
        }
        Layout::new(parts)
    }

    /// LeCun-normal weights, zero biases.
    pub fn init(&self, rng: &mut Rng) -> Result<ParamVector> {
        self.validate()?;
        let layout = Arc::new(self.layout());
        let mut params = ParamVector::zeros(layout.clone());
        for seg in layout.segments() {
            if seg.shape.len() == 2 {
                let std = (1.0 / seg.shape[0] as f64).sqrt();
                for v in &mut params.values_mut()[seg.range()] {
                    *v = (std * rng.normal()) as f32;
                }
            }
        }
        Ok(params)
    }
}

/// Sinusoidal embedding of timestep `t`: `[sin(t·ω_i), cos(t·ω_i)]` with
/// `ω_i = 10000^(−i/half)`.
pub fn timestep_embedding(t: usize, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
}

/// Small ε-prediction network.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsModel {
    arch: Architecture,
    params: ParamVector,
}

impl EpsModel {
    pub fn new(arch: Architecture, params: ParamVector) -> Result<Self> {
        arch.validate()?;
        if **params.layout() != arch.layout() {
            return Err(Error::Layout(
                "parameter layout does not match the architecture".into(),
            ));
        }
        Ok(Self { arch, params })
    }

    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        let params = arch.init(rng)?;
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        self.params.ensure_same_layout(&params)?;
        Ok(Self {
            arch: self.arch.clone(),
            params,
        })
    }

    /// Adds the network to `g`; `g` must have been built over parameters with
    /// this model's layout.
    pub fn forward(arch: &Architecture, g: &mut Graph, x: NodeId, ts: &[usize]) -> Result<NodeId> {
        let rows = g.value(x).rows;
        if ts.len() != rows {
            return Err(Error::Shape(format!(
                "{} timesteps for {} rows",
                ts.len(),
                rows
            )));
        }
        let mut emb = Mat::zeros(rows, arch.embed_dim);
        for (i, &t) in ts.iter().enumerate() {
            timestep_embedding(t, arch.embed_dim, &mut emb.data[i * arch.embed_dim..(i + 1) * arch.embed_dim]);
        }
        let emb = g.constant(emb);
        let mut h = g.concat(x, emb)?;
        let last = arch.num_layers() - 1;
        for i in 0..=last {
            let w = g.param(&format!("layer{i}.weight"))?;
            let b = g.param(&format!("layer{i}.bias"))?;
            h = g.dense(h, w, b)?;
            if i < last {
                h = g.activation(h, arch.activation.into());
            }
        }
        Ok(h)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.arch.dim {
            return Err(Error::Shape(format!(
                "model expects {} input columns, got {}",
                self.arch.dim,
                x.cols()
            )));
        }
        Ok(())
    }
}

impl EpsPredictor for EpsModel {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn predict_rows(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::new(&self.params);
        let xin = g.constant(Mat::from_tensor(x));
        let out = Self::forward(&self.arch, &mut g, xin, ts)?;
        Ok(g.value(out).to_tensor())
    }

    fn predict_vjp(&self, x: &Tensor, t: usize, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        x.same_shape(upstream)?;
        let mut g = Graph::new(&self.params);
        let xin = g.variable(Mat::from_tensor(x));
        let out = Self::forward(&self.arch, &mut g, xin, &vec![t; x.rows()])?;
        let pred = g.value(out).to_tensor();
        let grads = g.backward_seeded(out, Mat::from_tensor(upstream));
        let data = grads
            .wrt(xin)
            .expect("input gradient")
            .data
            .iter()
            .map(|&v| v as f32)
            .collect();
        Ok((pred, Tensor::new(x.shape().to_vec(), data)?))
    }
}

/// Exact ε-predictor for data `x0 ~ N(0, c²·I)`:
/// `ε̂(x_t, t) = √(1−ᾱ_t)·x_t / (ᾱ_t·c² + 1 − ᾱ_t)`.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianEps {
    c: f64,
    dim: usize,
    alpha_bar: Vec<f64>,
}

impl AnalyticGaussianEps {
    pub fn new(c: f64, dim: usize, sched: &NoiseSchedule) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::Config(format!("data scale must be positive, got {c}")));
        }
        Ok(Self {
            c,
            dim,
            alpha_bar: sched.alpha_bars().to_vec(),
        })
    }

    pub fn coefficient(&self, t: usize) -> Result<f64> {
        let ab = *self.alpha_bar.get(t.wrapping_sub(1)).ok_or(Error::Index {
            what: "timestep",
            index: t,
            max: self.alpha_bar.len(),
        })?;
        Ok((1.0 - ab).sqrt() / (ab * self.c * self.c + 1.0 - ab))
    }
}

impl EpsPredictor for AnalyticGaussianEps {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_rows(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let mut out = x.clone();
        for (i, &t) in ts.iter().enumerate() {
            let k = self.coefficient(t)?;
            for v in out.row_mut(i) {
                *v = (k * *v as f64) as f32;
            }
        }
        Ok(out)
    }

    fn predict_vjp(&self, x: &Tensor, t: usize, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
        let k = self.coefficient(t)?;
        let pred = self.predict(x, t)?;
        let vjp = Tensor::from_fn(upstream.shape().to_vec(), |i| {
            (k * upstream.data()[i] as f64) as f32
        });
        Ok((pred, vjp))
    }
}

/// Predicts zero noise everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ZeroEps {
    pub dim: usize,
}

impl EpsPredictor for ZeroEps {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_rows(&self, x: &Tensor, _ts: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(x.shape().to_vec()))
    }

    fn predict_vjp(&self, x: &Tensor, _t: usize, _upstream: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((Tensor::zeros(x.shape().to_vec()), Tensor::zeros(x.shape().to_vec())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::linear_schedule;

    #[test]
    fn analytic_unit_scale_and_noise_limit() {
        let s = linear_schedule(100, 1e-3, 0.2).unwrap();
        let m = AnalyticGaussianEps::new(1.0, 2, &s).unwrap();
        for t in [1, 50, 100] {
            let ab = s.alpha_bar(t).unwrap();
            assert!((m.coefficient(t).unwrap() - (1.0 - ab).sqrt()).abs() < 1e-12);
        }
        // ᾱ → 0 drives the coefficient to 1.
        let s = linear_schedule(100, 0.5, 0.9).unwrap();
        let m = AnalyticGaussianEps::new(0.3, 2, &s).unwrap();
        assert!((m.coefficient(100).unwrap() - 1.0).abs() < 1e-9);
        assert!(AnalyticGaussianEps::new(0.0, 2, &s).is_err());
    }

    #[test]
    fn forward_shape_and_determinism() {
        let arch = Architecture {
            hidden: vec![8, 8],
            embed_dim: 4,
            ..Architecture::default()
        };
        let m = EpsModel::init(arch, &mut Rng::new(0)).unwrap();
        let x = Rng::new(1).gaussian(vec![5, 2]);
        let a = m.predict(&x, 10).unwrap();
        assert_eq!(a.shape(), &[5, 2]);
        assert_eq!(a, m.predict(&x, 10).unwrap());
        assert_ne!(a, m.predict(&x, 11).unwrap());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let arch = Architecture {
            hidden: vec![6],
            embed_dim: 4,
            ..Architecture::default()
        };
        let m = EpsModel::init(arch, &mut Rng::new(2)).unwrap();
        let x = Rng::new(3).gaussian(vec![3, 2]);
        let u = Rng::new(4).gaussian(vec![3, 2]);
        let (_, vjp) = m.predict_vjp(&x, 7, &u).unwrap();
        let dot = |y: &Tensor| -> f64 {
            y.data().iter().zip(u.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        for i in 0..x.len() {
            let h = 1e-2f32;
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (dot(&m.predict(&xp, 7).unwrap()) - dot(&m.predict(&xm, 7).unwrap())) / (2.0 * h as f64);
            assert!((fd - vjp.data()[i] as f64).abs() < 1e-3, "{fd} vs {}", vjp.data()[i]);
        }
    }

    #[test]
    fn layout_rejects_foreign_params() {
        let arch = Architecture::default();
        let p = ParamVector::from_slice("w", &[0.0; 4]);
        assert!(EpsModel::new(arch, p).is_err());
    }
}
