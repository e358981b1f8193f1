//! Loss-landscape probes: the LPF metric (expected loss under Gaussian
//! parameter noise), loss-versus-perturbation-norm curves and 2-D loss
//! surfaces along random orthonormal directions.
//!
//! Every probe takes the loss as a closure over parameters, evaluates it on
//! perturbed copies and never touches the parameters it was given.

use std::io::Write;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Architecture, EpsModel, NoiseSchedule, NoisedBatch, ToyDataset};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamVector, Rng};

/// Scale of the Gaussian parameter noise used by [`lpf`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    Absolute(f64),
    /// Multiple of the RMS of the parameter values.
    RelativeToRms(f64),
}

impl NoiseScale {
    pub fn resolve(self, params: &ParamVector) -> f64 {
        match self {
            NoiseScale::Absolute(s) => s,
            NoiseScale::RelativeToRms(k) => k * params.rms(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LpfConfig {
    pub sigma: NoiseScale,
    pub samples: usize,
    /// Rows in the shared evaluation batch.
    pub batch: usize,
}

impl Default for LpfConfig {
    fn default() -> Self {
        Self {
            sigma: NoiseScale::RelativeToRms(0.01),
            samples: 32,
            batch: 4096,
        }
    }
}

impl LpfConfig {
    pub fn validate(&self) -> Result<()> {
        let s = match self.sigma {
            NoiseScale::Absolute(s) | NoiseScale::RelativeToRms(s) => s,
        };
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("LPF noise scale must be >= 0, got {s}")));
        }
        if self.samples == 0 {
            return Err(Error::Config("LPF needs at least one Monte-Carlo sample".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("LPF evaluation batch must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpfResult {
    /// Resolved absolute noise standard deviation.
    pub sigma: f64,
    pub samples: usize,
    pub value: f64,
    pub stderr: f64,
    /// Draws whose perturbed loss was not finite.
    pub exclusions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub radius: f64,
    pub mean_loss: f64,
    pub std_loss: f64,
    /// Directions that produced a finite loss.
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    pub extent: f64,
    pub resolution: usize,
    pub seed_u: u64,
    pub seed_v: u64,
    /// Row-major, `losses[i * resolution + j]` at `(coords[i], coords[j])`.
    pub losses: Vec<f64>,
    pub coords: Vec<f64>,
}

impl SurfaceGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.losses[i * self.resolution + j]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub lpf: LpfResult,
    pub curve: Vec<CurvePoint>,
    pub surface: Option<SurfaceGrid>,
}

/// A fixed noised batch shared by every model under comparison, so loss
/// differences come from the models and not from the estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub seed: u64,
    pub batch: NoisedBatch,
}

impl EvalSet {
    pub fn new(dataset: &ToyDataset, sched: &NoiseSchedule, seed: u64, n: usize) -> Result<Self> {
        let mut rng = Rng::new(seed).substream("eval-set");
        let x0 = dataset.sample(&mut rng, n);
        let batch = NoisedBatch::draw(&x0, sched, &mut rng, 0.0)?;
        Ok(Self { seed, batch })
    }

    pub fn loss(&self, arch: &Architecture, params: &ParamVector) -> Result<f64> {
        let mut g = Graph::new(params);
        let l = self.batch.loss_graph(arch, &mut g)?;
        Ok(g.value(l).scalar())
    }

    /// Closure form for the probes below.
    pub fn loss_fn<'a>(&'a self, model: &'a EpsModel) -> impl Fn(&ParamVector) -> Result<f64> + 'a {
        move |p| self.loss(model.arch(), p)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn unit_direction(rng: &mut Rng, like: &ParamVector) -> ParamVector {
    let mut d = like.zeros_like();
    for v in d.values_mut() {
        *v = rng.normal() as f32;
    }
    let norm = d.norm();
    d.scaled(1.0 / norm)
}

/// Mean loss over `samples` draws of `params + z`, `z ~ N(0, σ²I)`.
///
/// With σ = 0 the unperturbed loss is returned directly and `rng` is not used.
pub fn lpf<F>(loss: F, params: &ParamVector, cfg: &LpfConfig, rng: &Rng) -> Result<LpfResult>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    cfg.validate()?;
    let sigma = cfg.sigma.resolve(params);
    if sigma == 0.0 {
        let value = loss(params)?;
        return Ok(LpfResult {
            sigma,
            samples: cfg.samples,
            value,
            stderr: 0.0,
            exclusions: 0,
        });
    }
    let mut values = Vec::with_capacity(cfg.samples);
    let mut exclusions = 0;
    for s in 0..cfg.samples {
        let mut r = rng.substream_indexed("lpf", s as u64);
        let mut p = params.clone();
        for v in p.values_mut() {
            *v = (*v as f64 + sigma * r.normal()) as f32;
        }
        match loss(&p) {
            Ok(l) if l.is_finite() => values.push(l),
            Ok(_) | Err(Error::Numeric { .. }) => exclusions += 1,
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::numeric("LPF: every perturbed loss", "<loss>"));
    }
    let (value, std) = mean_std(&values);
    Ok(LpfResult {
        sigma,
        samples: cfg.samples,
        value,
        stderr: std / (values.len() as f64).sqrt(),
        exclusions,
    })
}

/// Mean and standard deviation of `loss(params + r·u)` over `k` random unit
/// directions `u` per radius.
pub fn perturbation_curve<F>(
    loss: F,
    params: &ParamVector,
    radii: &[f64],
    k: usize,
    rng: &Rng,
) -> Result<Vec<CurvePoint>>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    if k == 0 {
        return Err(Error::Config("perturbation curve needs k >= 1".into()));
    }
    if radii.windows(2).any(|w| w[0] >= w[1]) || radii.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::Config("radii must be non-negative and strictly increasing".into()));
    }
    let mut out = Vec::with_capacity(radii.len());
    for (ri, &radius) in radii.iter().enumerate() {
        let mut r = rng.substream_indexed("curve", ri as u64);
        let mut values = Vec::with_capacity(k);
        for _ in 0..k {
            let u = unit_direction(&mut r, params);
            let p = params.add_scaled(radius, &u)?;
            match loss(&p) {
                Ok(l) if l.is_finite() => values.push(l),
                Ok(_) | Err(Error::Numeric { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        if values.is_empty() {
            return Err(Error::numeric(format!("perturbation curve at radius {radius}"), "<loss>"));
        }
        let (mean_loss, std_loss) = mean_std(&values);
        out.push(CurvePoint {
            radius,
            mean_loss,
            std_loss,
            k: values.len(),
        });
    }
    Ok(out)
}

/// Loss on a `resolution × resolution` grid over `[−extent, extent]²` spanned
/// by two orthonormalized random directions. Non-finite cells are stored as
/// NaN.
pub fn loss_surface_grid<F>(
    loss: F,
    params: &ParamVector,
    extent: f64,
    resolution: usize,
    rng: &Rng,
) -> Result<SurfaceGrid>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    if resolution < 2 {
        return Err(Error::Config("surface resolution must be >= 2".into()));
    }
    if !(extent >= 0.0 && extent.is_finite()) {
        return Err(Error::Config(format!("surface extent must be >= 0, got {extent}")));
    }
    let mut seeder = rng.substream("surface");
    let seed_u = seeder.next_u64();
    let seed_v = seeder.next_u64();
    let u = unit_direction(&mut Rng::new(seed_u), params);
    let v = unit_direction(&mut Rng::new(seed_v), params);
    let v = v.add_scaled(-u.dot(&v)?, &u)?;
    let v = v.scaled(1.0 / v.norm());
    let half = (resolution - 1) as f64;
    let coords: Vec<f64> = (0..resolution)
        .map(|i| extent * (2.0 * i as f64 - half) / half)
        .collect();
    let mut losses = Vec::with_capacity(resolution * resolution);
    let mut p = params.clone();
    for &a in &coords {
        for &b in &coords {
            for (((o, &w), &du), &dv) in p
                .values_mut()
                .iter_mut()
                .zip(params.values())
                .zip(u.values())
                .zip(v.values())
            {
                *o = (w as f64 + a * du as f64 + b * dv as f64) as f32;
            }
            let l = match loss(&p) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::Numeric { .. }) => f64::NAN,
                Err(e) => return Err(e),
            };
            losses.push(l);
        }
    }
    Ok(SurfaceGrid {
        extent,
        resolution,
        seed_u,
        seed_v,
        losses,
        coords,
    })
}

pub fn write_curve_csv(curve: &[CurvePoint], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "radius,mean_loss,std_loss,k")?;
    for p in curve {
        writeln!(out, "{},{},{},{}", p.radius, p.mean_loss, p.std_loss, p.k)?;
    }
    Ok(())
}

pub fn write_surface_csv(grid: &SurfaceGrid, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "i,j,u_coord,v_coord,loss")?;
    for i in 0..grid.resolution {
        for j in 0..grid.resolution {
            writeln!(out, "{i},{j},{},{},{}", grid.coords[i], grid.coords[j], grid.at(i, j))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(a: f64) -> impl Fn(&ParamVector) -> Result<f64> {
        move |p| Ok(0.5 * a * p.values().iter().map(|&w| (w as f64).powi(2)).sum::<f64>())
    }

    fn abs_cfg(sigma: f64, samples: usize) -> LpfConfig {
        LpfConfig {
            sigma: NoiseScale::Absolute(sigma),
            samples,
            batch: 1,
        }
    }

    #[test]
    fn zero_noise_is_exact_loss() {
        let p = ParamVector::from_slice("w", &[0.3, -1.2]);
        let r = lpf(quad(2.0), &p, &abs_cfg(0.0, 8), &Rng::new(0)).unwrap();
        assert_eq!(r.value, quad(2.0)(&p).unwrap());
        assert_eq!(r.stderr, 0.0);
    }

    #[test]
    fn quadratic_lpf_matches_second_moment() {
        // E[½a(w*+z)²] − ½a·w*² = ½a·σ² at w* = 0.
        let (a, sigma) = (3.0, 0.2);
        let p = ParamVector::from_slice("w", &[0.0]);
        let r = lpf(quad(a), &p, &abs_cfg(sigma, 20_000), &Rng::new(4)).unwrap();
        let expected = 0.5 * a * sigma * sigma;
        assert!((r.value - expected).abs() < 3.0 * r.stderr, "{r:?} vs {expected}");
    }

    #[test]
    fn quadratic_lpf_monotone_in_sigma() {
        let p = ParamVector::from_slice("w", &[0.5, -0.25, 1.0]);
        let mut prev = f64::NEG_INFINITY;
        for s in [0.0, 0.01, 0.05, 0.1, 0.3, 1.0] {
            let v = lpf(quad(1.5), &p, &abs_cfg(s, 64), &Rng::new(1)).unwrap().value;
            assert!(v >= prev, "{s}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn relative_scale_uses_rms() {
        let p = ParamVector::from_slice("w", &[3.0, -4.0]);
        let s = NoiseScale::RelativeToRms(0.01).resolve(&p);
        assert!((s - 0.01 * (12.5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_draws_are_excluded() {
        let p = ParamVector::from_slice("w", &[0.0]);
        let f = |q: &ParamVector| Ok(if q.values()[0] > 0.0 { f64::NAN } else { 1.0 });
        let r = lpf(f, &p, &abs_cfg(1.0, 100), &Rng::new(2)).unwrap();
        assert!(r.exclusions > 20 && r.exclusions < 80);
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn curve_at_zero_radius_is_baseline() {
        let p = ParamVector::from_slice("w", &[0.7, 0.1, -0.4]);
        let c = perturbation_curve(quad(2.0), &p, &[0.0, 0.5], 5, &Rng::new(3)).unwrap();
        assert_eq!(c[0].mean_loss, quad(2.0)(&p).unwrap());
        assert_eq!(c[0].std_loss, 0.0);
        assert!(perturbation_curve(quad(2.0), &p, &[0.5, 0.5], 5, &Rng::new(3)).is_err());
    }

    #[test]
    fn one_dimensional_curve_is_half_a_r_squared() {
        let a = 4.0;
        let p = ParamVector::from_slice("w", &[0.0]);
        let radii = [0.0, 0.25, 0.5, 1.0];
        let c = perturbation_curve(quad(a), &p, &radii, 7, &Rng::new(5)).unwrap();
        for (pt, r) in c.iter().zip(radii) {
            assert!((pt.mean_loss - 0.5 * a * r * r).abs() < 1e-6);
        }
    }

    #[test]
    fn surface_center_and_symmetry() {
        let p = ParamVector::from_slice("w", &[0.0; 6]);
        let g = loss_surface_grid(quad(1.0), &p, 1.0, 5, &Rng::new(6)).unwrap();
        assert_eq!(g.at(2, 2), 0.0);
        for i in 0..5 {
            for j in 0..5 {
                let (x, y) = (g.at(i, j), g.at(4 - i, 4 - j));
                assert!((x - y).abs() < 1e-6 * x.max(1e-6));
            }
        }
        assert!(loss_surface_grid(quad(1.0), &p, 1.0, 1, &Rng::new(6)).is_err());
    }

    #[test]
    fn probes_leave_params_unchanged() {
        let p = ParamVector::from_slice("w", &[0.1, 0.2, 0.3]);
        let before = p.clone();
        lpf(quad(1.0), &p, &abs_cfg(0.1, 4), &Rng::new(0)).unwrap();
        perturbation_curve(quad(1.0), &p, &[0.0, 1.0], 3, &Rng::new(0)).unwrap();
        loss_surface_grid(quad(1.0), &p, 1.0, 3, &Rng::new(0)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn analytic_gaussian_linear_fit_surface_is_convex() {
        // One coefficient per timestep: ε̂ = k_t·x_t, fitted in closed form.
        // The loss is quadratic in k, so every grid line is convex.
        use crate::diffusion::{linear_schedule, ToyDataset};
        let sched = linear_schedule(10, 0.01, 0.5).unwrap();
        let set = EvalSet::new(&ToyDataset::gaussian(2, 0.5), &sched, 3, 2000).unwrap();
        let c2: f64 = 0.25;
        let k0: Vec<f32> = (1..=10)
            .map(|t| {
                let ab = sched.alpha_bar(t).unwrap();
                ((1.0 - ab).sqrt() / (ab * c2 + 1.0 - ab)) as f32
            })
            .collect();
        let params = ParamVector::from_slice("k", &k0);
        let b = &set.batch;
        let f = |p: &ParamVector| -> Result<f64> {
            let mut s = 0.0;
            for i in 0..b.len() {
                let k = p.values()[b.timesteps[i] - 1] as f64;
                for (x, e) in b.inputs.row(i).iter().zip(b.eps.row(i)) {
                    s += (k * *x as f64 - *e as f64).powi(2);
                }
            }
            Ok(s / b.len() as f64)
        };
        let g = loss_surface_grid(f, &params, 0.5, 9, &Rng::new(8)).unwrap();
        for i in 0..9 {
            for j in 1..8 {
                let row = g.at(i, j - 1) - 2.0 * g.at(i, j) + g.at(i, j + 1);
                let col = g.at(j - 1, i) - 2.0 * g.at(j, i) + g.at(j + 1, i);
                assert!(row > -1e-9 && col > -1e-9);
            }
        }
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_curve_csv(
            &[CurvePoint {
                radius: 0.0,
                mean_loss: 1.0,
                std_loss: 0.0,
                k: 3,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "radius,mean_loss,std_loss,k\n0,1,0,3\n");
    }
}
