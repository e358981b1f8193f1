use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TheoryError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureActivation {
    Identity,
    Relu,
}

impl FeatureActivation {
    fn apply(self, v: f64) -> f64 {
        match self {
            FeatureActivation::Identity => v,
            FeatureActivation::Relu => v.max(0.0),
        }
    }
}

/// `s(x) = (1/m)·θ·σ(Wᵀx + Uᵀe)` with `θ, W: d×m`, `U: d_e×m` and a fixed
/// embedding `e`. `W`, `U` and `e` are frozen once built.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomFeatureScoreModel {
    theta: DMatrix<f64>,
    w: DMatrix<f64>,
    u: DMatrix<f64>,
    e: DVector<f64>,
    activation: FeatureActivation,
}

pub(crate) fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub(crate) fn normal_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

impl RandomFeatureScoreModel {
    pub fn new(
        theta: DMatrix<f64>,
        w: DMatrix<f64>,
        u: DMatrix<f64>,
        e: DVector<f64>,
        activation: FeatureActivation,
    ) -> Result<Self> {
        let (d, m) = w.shape();
        if m == 0 || d == 0 {
            return Err(TheoryError::Invalid("empty feature matrix".into()));
        }
        if theta.shape() != (d, m) {
            return Err(TheoryError::Invalid(format!(
                "theta is {:?}, expected {:?}",
                theta.shape(),
                (d, m)
            )));
        }
        if u.ncols() != m || u.nrows() != e.len() {
            return Err(TheoryError::Invalid(format!(
                "U is {:?} and e has length {}; expected {} columns and matching rows",
                u.shape(),
                e.len(),
                m
            )));
        }
        Ok(Self {
            theta,
            w,
            u,
            e,
            activation,
        })
    }

    /// Standard normal `θ`, `W`, `U`, `e`.
    pub fn random(
        rng: &mut impl Rng,
        d: usize,
        m: usize,
        d_e: usize,
        activation: FeatureActivation,
    ) -> Result<Self> {
        let theta = normal_matrix(rng, d, m);
        let w = normal_matrix(rng, d, m);
        let u = normal_matrix(rng, d_e, m);
        let e = normal_vector(rng, d_e);
        Self::new(theta, w, u, e, activation)
    }

    pub fn d(&self) -> usize {
        self.w.nrows()
    }

    pub fn m(&self) -> usize {
        self.w.ncols()
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn e(&self) -> &DVector<f64> {
        &self.e
    }

    pub fn activation(&self) -> FeatureActivation {
        self.activation
    }

    /// Same frozen features with new learnable weights.
    pub fn with_theta(&self, theta: DMatrix<f64>) -> Result<Self> {
        Self::new(theta, self.w.clone(), self.u.clone(), self.e.clone(), self.activation)
    }

    /// `Uᵀe`, the time-embedding contribution to every pre-activation.
    pub fn embedding_bias(&self) -> DVector<f64> {
        self.u.transpose() * &self.e
    }

    pub fn pre_activations(&self, x: &DVector<f64>) -> DVector<f64> {
        self.w.transpose() * x + self.embedding_bias()
    }

    pub fn features(&self, x: &DVector<f64>) -> DVector<f64> {
        self.pre_activations(x).map(|v| self.activation.apply(v))
    }

    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.theta * self.features(x) / self.m() as f64
    }
}

/// Squared residual `‖s_θ(x) − ∇log p(x)‖²` at one point.
pub fn score_loss(
    model: &RandomFeatureScoreModel,
    x: &DVector<f64>,
    grad_log_p: impl Fn(&DVector<f64>) -> DVector<f64>,
) -> Result<f64> {
    if x.len() != model.d() {
        return Err(TheoryError::Invalid(format!(
            "point has dimension {}, model expects {}",
            x.len(),
            model.d()
        )));
    }
    Ok((model.score(x) - grad_log_p(x)).norm_squared())
}

/// `∇log N(x; 0, I) = −x`.
pub fn standard_normal_score(x: &DVector<f64>) -> DVector<f64> {
    -x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_theta_against_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = RandomFeatureScoreModel::random(&mut rng, 3, 4, 2, FeatureActivation::Identity).unwrap();
        let m = m.with_theta(DMatrix::zeros(3, 4)).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let l = score_loss(&m, &x, standard_normal_score).unwrap();
        assert!((l - x.norm_squared()).abs() < 1e-14);
    }

    #[test]
    fn perfect_score_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = RandomFeatureScoreModel::random(&mut rng, 2, 4, 3, FeatureActivation::Relu).unwrap();
        let x = DVector::from_vec(vec![0.3, 0.7]);
        let target = m.score(&x);
        assert_eq!(score_loss(&m, &x, |_| target.clone()).unwrap(), 0.0);
    }

    #[test]
    fn matches_entrywise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = RandomFeatureScoreModel::random(&mut rng, 2, 4, 3, FeatureActivation::Relu).unwrap();
        let x = DVector::from_vec(vec![-0.4, 1.1]);
        // s_i = (1/m) Σ_j θ_ij · relu(Σ_k W_kj x_k + Σ_l U_lj e_l)
        let mut s = [0.0; 2];
        for i in 0..2 {
            for j in 0..4 {
                let mut pre = 0.0;
                for k in 0..2 {
                    pre += m.w()[(k, j)] * x[k];
                }
                for l in 0..3 {
                    pre += m.u()[(l, j)] * m.e()[l];
                }
                s[i] += m.theta()[(i, j)] * pre.max(0.0) / 4.0;
            }
        }
        let direct = (s[0] + x[0]).powi(2) + (s[1] + x[1]).powi(2);
        let l = score_loss(&m, &x, standard_normal_score).unwrap();
        assert!((l - direct).abs() < 1e-12);
    }

    #[test]
    fn shape_checks() {
        let r = RandomFeatureScoreModel::new(
            DMatrix::zeros(2, 3),
            DMatrix::zeros(2, 4),
            DMatrix::zeros(1, 4),
            DVector::zeros(1),
            FeatureActivation::Identity,
        );
        assert!(r.is_err());
    }
}
