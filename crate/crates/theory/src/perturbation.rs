use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TheoryError};
use crate::rf::{normal_matrix, standard_normal_score, FeatureActivation, RandomFeatureScoreModel};

/// Additive perturbation `δ` of the learnable weights, same shape as `θ`.
/// Its size is the Frobenius norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub delta: DMatrix<f64>,
}

/// Row-major nested vectors, for JSON dumps.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationDump {
    pub delta: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub e: Vec<f64>,
    pub m: usize,
}

impl PerturbationDump {
    pub fn new(delta: &Perturbation, w: &DMatrix<f64>, u: &DMatrix<f64>, e: &DVector<f64>) -> Self {
        Self {
            delta: matrix_rows(&delta.delta),
            w: matrix_rows(w),
            u: matrix_rows(u),
            e: e.iter().copied().collect(),
            m: w.ncols(),
        }
    }
}

impl Perturbation {
    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            delta: DMatrix::zeros(d, m),
        }
    }

    pub fn norm(&self) -> f64 {
        self.delta.norm()
    }

    /// `δ_w = δWᵀ`, a d×d matrix.
    pub fn delta_w(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        &self.delta * w.transpose()
    }

    /// `δ_u = δUᵀe`, a d-vector.
    pub fn delta_u(&self, u: &DMatrix<f64>, e: &DVector<f64>) -> DVector<f64> {
        &self.delta * (u.transpose() * e)
    }

    /// Largest entry of `δWᵀ − Wδᵀ`.
    pub fn asymmetry(&self, w: &DMatrix<f64>) -> f64 {
        let dw = self.delta_w(w);
        (&dw - dw.transpose()).amax()
    }

    pub fn ensure_symmetric(&self, w: &DMatrix<f64>) -> Result<()> {
        let scale = self.delta_w(w).amax().max(1.0);
        let asym = self.asymmetry(w);
        if asym > 1e-10 * scale {
            return Err(TheoryError::NotAdmissible(format!(
                "δWᵀ is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        Ok(())
    }
}

/// `I(x, δ) = (1/(2m))·xᵀδ_w x + (1/m)·xᵀδ_u + C`.
pub fn perturbation_exponent(
    x: &DVector<f64>,
    delta: &Perturbation,
    w: &DMatrix<f64>,
    u: &DMatrix<f64>,
    e: &DVector<f64>,
    c: f64,
) -> Result<f64> {
    delta.ensure_symmetric(w)?;
    let m = w.ncols() as f64;
    let dw = delta.delta_w(w);
    let du = delta.delta_u(u, e);
    Ok(x.dot(&(&dw * x)) / (2.0 * m) + x.dot(&du) / m + c)
}

/// `∇ₓI = (1/m)(δ_w x + δ_u)`, using the symmetric part of `δ_w`.
pub fn exponent_gradient(
    x: &DVector<f64>,
    delta: &Perturbation,
    w: &DMatrix<f64>,
    u: &DMatrix<f64>,
    e: &DVector<f64>,
) -> Result<DVector<f64>> {
    delta.ensure_symmetric(w)?;
    let m = w.ncols() as f64;
    let dw = delta.delta_w(w);
    let sym = (&dw + dw.transpose()) * 0.5;
    Ok((sym * x + delta.delta_u(u, e)) / m)
}

/// Largest pointwise `|L(x; θ+δ, p) − L(x; θ, p̂)|` over `xs`, with `p` the
/// standard normal and `∇log p̂ = ∇log p − ∇I`.
///
/// The identity only holds where the features are linear in their input:
/// for ReLU every pre-activation at every point must be strictly positive.
pub fn loss_equality_check(
    model: &RandomFeatureScoreModel,
    delta: &Perturbation,
    xs: &[DVector<f64>],
) -> Result<f64> {
    let (w, u, e) = (model.w(), model.u(), model.e());
    delta.ensure_symmetric(w)?;
    if delta.delta.shape() != model.theta().shape() {
        return Err(TheoryError::Invalid("δ and θ differ in shape".into()));
    }
    if model.activation() == FeatureActivation::Relu {
        for (i, x) in xs.iter().enumerate() {
            let pre = model.pre_activations(x);
            if let Some(j) = pre.iter().position(|&v| v <= 0.0) {
                return Err(TheoryError::Invalid(format!(
                    "ReLU regime violated: pre-activation {j} at point {i} is {}",
                    pre[j]
                )));
            }
        }
    }
    let shifted = model.with_theta(model.theta() + &delta.delta)?;
    let mut worst: f64 = 0.0;
    for x in xs {
        let lhs = (shifted.score(x) - standard_normal_score(x)).norm_squared();
        let grad_log_p_hat = standard_normal_score(x) - exponent_gradient(x, delta, w, u, e)?;
        let rhs = (model.score(x) - grad_log_p_hat).norm_squared();
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Draws perturbations satisfying `δWᵀ = Wδᵀ` inside a Frobenius ball.
///
/// With `P = WW⁺` the projector onto the column space of `W`,
/// `δ = (P·S·P)·(W⁺)ᵀ + Z·(I − W⁺W)` for random symmetric `S` and random `Z`:
/// the first term makes `δWᵀ = PSP`, the second lives in the null space of
/// `W` and adds nothing to `δWᵀ`. The sum is rescaled to a radius drawn
/// uniformly in volume from the ball.
#[derive(Clone, Debug)]
pub struct AdmissibleSampler {
    w: DMatrix<f64>,
    col_proj: DMatrix<f64>,
    row_map: DMatrix<f64>,
    null_proj: DMatrix<f64>,
}

impl AdmissibleSampler {
    pub fn new(w: &DMatrix<f64>) -> Result<Self> {
        let (d, m) = w.shape();
        let svd = w.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let tol = 1e-10 * smax.max(f64::MIN_POSITIVE);
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        if rank < d.min(m) || smax == 0.0 {
            return Err(TheoryError::NotAdmissible(format!(
                "W ({d}×{m}) is rank-deficient (rank {rank})"
            )));
        }
        let pinv = svd
            .pseudo_inverse(tol)
            .map_err(|e| TheoryError::NotAdmissible(e.to_string()))?;
        let col_proj = w * &pinv;
        let null_proj = DMatrix::identity(m, m) - &pinv * w;
        Ok(Self {
            w: w.clone(),
            col_proj,
            row_map: pinv.transpose(),
            null_proj,
        })
    }

    /// Direction with unit Frobenius norm satisfying the symmetry constraint.
    pub fn direction(&self, rng: &mut impl Rng) -> Perturbation {
        let (d, m) = self.w.shape();
        let g = normal_matrix(rng, d, d);
        let s = &self.col_proj * ((&g + g.transpose()) * 0.5) * &self.col_proj;
        let z = normal_matrix(rng, d, m);
        let delta = s * &self.row_map + z * &self.null_proj;
        let n = delta.norm();
        Perturbation { delta: delta / n }
    }

    /// A perturbation with `‖δ‖_F ≤ radius` for which `I + δWᵀ/m` is
    /// positive definite, by rejection.
    pub fn sample(&self, rng: &mut impl Rng, radius: f64, max_attempts: usize) -> Result<Perturbation> {
        let (d, m) = self.w.shape();
        if radius == 0.0 {
            return Ok(Perturbation::zeros(d, m));
        }
        for _ in 0..max_attempts {
            let dir = self.direction(rng);
            let r = radius * rng.random::<f64>().powf(1.0 / (d * m) as f64);
            let delta = Perturbation {
                delta: dir.delta * r,
            };
            let a = DMatrix::identity(d, d) + delta.delta_w(&self.w) / m as f64;
            if a.symmetric_eigenvalues().min() > 0.0 {
                return Ok(delta);
            }
        }
        Err(TheoryError::SamplerExhausted {
            attempts: max_attempts,
            reason: format!("no positive-definite I + δWᵀ/m within radius {radius}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn hand_example_one_dimension() {
        // δw = δ·W = 0.2, δu = δ·U·e = 0.3 with W = 1, U = 1.5, e = 1, δ = 0.2.
        let delta = Perturbation { delta: scalar(0.2) };
        let i = perturbation_exponent(
            &DVector::from_element(1, 1.0),
            &delta,
            &scalar(1.0),
            &scalar(1.5),
            &DVector::from_element(1, 1.0),
            0.0,
        )
        .unwrap();
        assert!((i - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_perturbation_exponent_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = normal_matrix(&mut rng, 3, 5);
        let u = normal_matrix(&mut rng, 2, 5);
        let e = DVector::from_vec(vec![0.5, -1.0]);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(perturbation_exponent(&x, &Perturbation::zeros(3, 5), &w, &u, &e, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = normal_matrix(&mut rng, 3, 6);
        let u = normal_matrix(&mut rng, 2, 6);
        let e = DVector::from_vec(vec![0.3, 0.8]);
        let delta = AdmissibleSampler::new(&w).unwrap().sample(&mut rng, 1.0, 100).unwrap();
        let x = DVector::from_vec(vec![0.2, -0.5, 1.3]);
        let g = exponent_gradient(&x, &delta, &w, &u, &e).unwrap();
        let h = 1e-5;
        for k in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (perturbation_exponent(&xp, &delta, &w, &u, &e, 0.0).unwrap()
                - perturbation_exponent(&xm, &delta, &w, &u, &e, 0.0).unwrap())
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn asymmetric_perturbation_rejected() {
        let w = DMatrix::identity(2, 2);
        let delta = Perturbation {
            delta: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        };
        let r = perturbation_exponent(&DVector::zeros(2), &delta, &w, &DMatrix::zeros(1, 2), &DVector::zeros(1), 0.0);
        assert!(matches!(r, Err(TheoryError::NotAdmissible(_))));
    }

    #[test]
    fn sampler_respects_constraint_and_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // (5, 4) has more rows than columns and takes the projected branch.
        for (d, m) in [(2, 4), (3, 8), (5, 8), (5, 4)] {
            let w = normal_matrix(&mut rng, d, m);
            let s = AdmissibleSampler::new(&w).unwrap();
            for _ in 0..50 {
                let delta = s.sample(&mut rng, 0.7, 100).unwrap();
                assert!(delta.norm() <= 0.7 + 1e-12);
                assert!(delta.asymmetry(&w) < 1e-10);
            }
        }
    }

    #[test]
    fn rank_deficient_w_rejected() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(AdmissibleSampler::new(&w).is_err());
        let tall = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(AdmissibleSampler::new(&tall).is_err());
    }

    #[test]
    fn loss_equality_identity_and_relu_regime() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = RandomFeatureScoreModel::random(&mut rng, 2, 4, 3, FeatureActivation::Identity).unwrap();
        let delta = AdmissibleSampler::new(model.w()).unwrap().sample(&mut rng, 0.5, 100).unwrap();
        let xs: Vec<_> = (0..20).map(|_| crate::rf::normal_vector(&mut rng, 2)).collect();
        assert!(loss_equality_check(&model, &delta, &xs).unwrap() <= 1e-10);
        assert_eq!(loss_equality_check(&model, &Perturbation::zeros(2, 4), &xs).unwrap(), 0.0);

        // ReLU with a large embedding bias keeps every pre-activation positive.
        let u = DMatrix::from_element(1, 4, 1.0);
        let relu = RandomFeatureScoreModel::new(
            model.theta().clone(),
            model.w().clone(),
            u,
            DVector::from_element(1, 50.0),
            FeatureActivation::Relu,
        )
        .unwrap();
        assert!(loss_equality_check(&relu, &delta, &xs).unwrap() <= 1e-10);
        let neg = RandomFeatureScoreModel::new(
            relu.theta().clone(),
            relu.w().clone(),
            DMatrix::from_element(1, 4, 1.0),
            DVector::from_element(1, -50.0),
            FeatureActivation::Relu,
        )
        .unwrap();
        assert!(loss_equality_check(&neg, &delta, &xs).is_err());
    }
}
