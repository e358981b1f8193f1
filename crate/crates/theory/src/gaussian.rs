use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TheoryError};
use crate::perturbation::{AdmissibleSampler, Perturbation, PerturbationDump};

/// `N(μ_δ, Σ_δ)` induced by a symmetric perturbation:
/// `Σ_δ = (I + δWᵀ/m)⁻¹`, `μ_δ = −(1/m)·Σ_δ·δUᵀe`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedGaussian {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// `Σ_δ⁻¹ = I + δWᵀ/m`.
    pub precision: DMatrix<f64>,
    /// Eigenvalues of the precision, ascending.
    pub precision_eigenvalues: Vec<f64>,
    pub log_det_sigma: f64,
}

impl PerturbedGaussian {
    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        Self {
            mu: DVector::zeros(d),
            sigma: DMatrix::identity(d, d),
            precision: DMatrix::identity(d, d),
            precision_eigenvalues: vec![1.0; d],
            log_det_sigma: 0.0,
        }
    }

    pub fn d(&self) -> usize {
        self.mu.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let r = x - &self.mu;
        let d = self.d() as f64;
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.log_det_sigma + r.dot(&(&self.precision * &r)))
    }

    pub fn density(&self, x: &DVector<f64>) -> f64 {
        self.log_density(x).exp()
    }
}

/// Builds [`PerturbedGaussian`], rejecting a precision that is not positive
/// definite.
pub fn perturbed_gaussian(
    delta: &Perturbation,
    w: &DMatrix<f64>,
    u: &DMatrix<f64>,
    e: &DVector<f64>,
) -> Result<PerturbedGaussian> {
    delta.ensure_symmetric(w)?;
    let (d, m) = w.shape();
    let dw = delta.delta_w(w);
    let precision = DMatrix::identity(d, d) + (&dw + dw.transpose()) * (0.5 / m as f64);
    let eig = SymmetricEigen::new(precision.clone());
    let mut evals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    evals.sort_by(f64::total_cmp);
    if evals[0] <= 0.0 {
        return Err(TheoryError::NotPositiveDefinite(format!(
            "I + δWᵀ/m has eigenvalue {:.6e}",
            evals[0]
        )));
    }
    let inv = DVector::from_iterator(d, eig.eigenvalues.iter().map(|l| 1.0 / l));
    let sigma = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    let mu = -(&sigma * delta.delta_u(u, e)) / m as f64;
    let log_det_sigma = -evals.iter().map(|l| l.ln()).sum::<f64>();
    Ok(PerturbedGaussian {
        mu,
        sigma,
        precision,
        precision_eigenvalues: evals,
        log_det_sigma,
    })
}

/// `C = (1/(2m²))·δ_uᵀΣ_δδ_u + ½·log|Σ_δ|`, which normalizes `e^{−I}·N(0, I)`.
pub fn normalization_constant(
    delta: &Perturbation,
    w: &DMatrix<f64>,
    u: &DMatrix<f64>,
    e: &DVector<f64>,
) -> Result<f64> {
    let g = perturbed_gaussian(delta, w, u, e)?;
    let m = w.ncols() as f64;
    let du = delta.delta_u(u, e);
    Ok(du.dot(&(&g.sigma * &du)) / (2.0 * m * m) + 0.5 * g.log_det_sigma)
}

/// `KL(N(0, I) ‖ N(μ, Σ)) = ½[log|Σ| − d + tr Σ⁻¹ + μᵀΣ⁻¹μ]`.
pub fn gaussian_kl(g: &PerturbedGaussian) -> f64 {
    let d = g.d() as f64;
    0.5 * (g.log_det_sigma - d + g.precision.trace() + g.mu.dot(&(&g.precision * &g.mu)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapBound {
    pub kl_closed: f64,
    /// `½[Σ(σ_i − log σ_i) − d + (σ_d/m²)·‖Uᵀe‖²·Δ²]`.
    pub kl_eigen_bound: f64,
    /// Same expression with `1/σ_1 = λ_max(Σ_δ)` in place of `σ_d`; an upper
    /// bound on `kl_closed` for every admissible δ in the ball.
    pub kl_spectral_bound: f64,
    /// Eigenvalues `σ_1 ≤ … ≤ σ_d` of `Σ_δ⁻¹`.
    pub eigenvalues: Vec<f64>,
}

impl GapBound {
    pub fn holds(&self, tol: f64) -> bool {
        self.kl_closed <= self.kl_eigen_bound + tol
    }
}

/// Closed-form KL and both eigenvalue bounds for one δ with `‖δ‖_F ≤ radius`.
pub fn gap_bound(
    delta: &Perturbation,
    w: &DMatrix<f64>,
    u: &DMatrix<f64>,
    e: &DVector<f64>,
    radius: f64,
) -> Result<GapBound> {
    if !(radius >= 0.0) {
        return Err(TheoryError::Invalid(format!("ball radius must be >= 0, got {radius}")));
    }
    let g = perturbed_gaussian(delta, w, u, e)?;
    let (d, m) = w.shape();
    let s = &g.precision_eigenvalues;
    let spectral = s.iter().map(|l| l - l.ln()).sum::<f64>() - d as f64;
    let mean_scale = (u.transpose() * e).norm_squared() * radius * radius / (m * m) as f64;
    Ok(GapBound {
        kl_closed: gaussian_kl(&g),
        kl_eigen_bound: 0.5 * (spectral + s[d - 1] * mean_scale),
        kl_spectral_bound: 0.5 * (spectral + mean_scale / s[0]),
        eigenvalues: s.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSweep {
    pub radius: f64,
    pub samples: usize,
    pub max_kl: f64,
    pub max_eigen_bound: f64,
    /// Largest `kl_closed − kl_eigen_bound` seen.
    pub worst_margin: f64,
    pub violations: Vec<PerturbationDump>,
    pub violation_count: usize,
}

/// Samples `n` admissible δ in the ball and checks the eigenvalue bound for
/// each. At most `keep` offending δ are serialized.
pub fn eigen_gap_sweep(
    w: &DMatrix<f64>,
    u: &DMatrix<f64>,
    e: &DVector<f64>,
    radius: f64,
    n: usize,
    rng: &mut impl Rng,
    tol: f64,
    keep: usize,
) -> Result<GapSweep> {
    let sampler = AdmissibleSampler::new(w)?;
    let mut out = GapSweep {
        radius,
        samples: n,
        max_kl: 0.0,
        max_eigen_bound: 0.0,
        worst_margin: f64::NEG_INFINITY,
        violations: Vec::new(),
        violation_count: 0,
    };
    for _ in 0..n {
        let delta = sampler.sample(rng, radius, 1000)?;
        let b = gap_bound(&delta, w, u, e, radius)?;
        out.max_kl = out.max_kl.max(b.kl_closed);
        out.max_eigen_bound = out.max_eigen_bound.max(b.kl_eigen_bound);
        out.worst_margin = out.worst_margin.max(b.kl_closed - b.kl_eigen_bound);
        if !b.holds(tol) {
            out.violation_count += 1;
            if out.violations.len() < keep {
                out.violations.push(PerturbationDump::new(&delta, w, u, e));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rf::normal_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `W = I₂` (m = 2), so `δWᵀ = δ`; `U = I₂`, `e = (0.3, 0.4)`.
    fn diag_example() -> (Perturbation, DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        // δWᵀ/m = diag(0.1, 0.2) with m = 2 → δ = diag(0.2, 0.4);
        // δUᵀe/m = (0.3, 0.4) → e = m·δ⁻¹·(0.3, 0.4) = (3, 2).
        let delta = Perturbation {
            delta: DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.4])),
        };
        let w = DMatrix::identity(2, 2);
        let u = DMatrix::identity(2, 2);
        let e = DVector::from_vec(vec![3.0, 2.0]);
        (delta, w, u, e)
    }

    #[test]
    fn zero_perturbation_is_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = normal_matrix(&mut rng, 3, 4);
        let u = normal_matrix(&mut rng, 2, 4);
        let e = DVector::from_vec(vec![1.0, 2.0]);
        let g = perturbed_gaussian(&Perturbation::zeros(3, 4), &w, &u, &e).unwrap();
        assert_eq!(g.mu, DVector::zeros(3));
        assert_eq!(g.sigma, DMatrix::identity(3, 3));
        assert_eq!(normalization_constant(&Perturbation::zeros(3, 4), &w, &u, &e).unwrap(), 0.0);
        assert_eq!(gaussian_kl(&g), 0.0);
    }

    #[test]
    fn diagonal_hand_example() {
        let (delta, w, u, e) = diag_example();
        let g = perturbed_gaussian(&delta, &w, &u, &e).unwrap();
        assert!((g.sigma[(0, 0)] - 1.0 / 1.1).abs() < 1e-14);
        assert!((g.sigma[(1, 1)] - 1.0 / 1.2).abs() < 1e-14);
        assert!((g.mu[0] + 0.3 / 1.1).abs() < 1e-14);
        assert!((g.mu[1] + 0.4 / 1.2).abs() < 1e-14);
        let c = normalization_constant(&delta, &w, &u, &e).unwrap();
        let expected = 0.5 * (0.09 / 1.1 + 0.16 / 1.2) + 0.5 * (-(1.1f64).ln() - (1.2f64).ln());
        assert!((c - expected).abs() < 1e-14);
        let kl = gaussian_kl(&g);
        let hand = 0.5 * (-(1.1f64 * 1.2).ln() - 2.0 + 2.3 + 0.09 / 1.1 + 0.16 / 1.2);
        assert!((kl - hand).abs() < 1e-14);
        assert!((kl - 0.11876).abs() < 5e-5);
    }

    #[test]
    fn non_positive_definite_names_eigenvalue() {
        let delta = Perturbation {
            delta: DMatrix::from_element(1, 1, -3.0),
        };
        let one = DMatrix::from_element(1, 1, 1.0);
        let r = perturbed_gaussian(&delta, &one, &one, &DVector::from_element(1, 1.0));
        match r {
            Err(TheoryError::NotPositiveDefinite(msg)) => assert!(msg.contains("-2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn eigen_bound_counterexample() {
        // d = m = 1, W = U = e = 1, δ = −½: precision ½, Σ = 2, μ = 1.
        // KL = ½·log 2 ≈ 0.347, but the stated bound gives ≈ 0.159 because it
        // charges the mean term with σ_d = ½ instead of λ_max(Σ) = 2.
        let one = DMatrix::from_element(1, 1, 1.0);
        let e = DVector::from_element(1, 1.0);
        let delta = Perturbation {
            delta: DMatrix::from_element(1, 1, -0.5),
        };
        let b = gap_bound(&delta, &one, &one, &e, 0.5).unwrap();
        assert!((b.kl_closed - 0.5 * 2f64.ln()).abs() < 1e-14);
        assert!(!b.holds(1e-9));
        assert!(b.kl_closed <= b.kl_spectral_bound + 1e-12);
        let sweep = eigen_gap_sweep(&one, &one, &e, 0.9, 200, &mut ChaCha8Rng::seed_from_u64(0), 1e-9, 3).unwrap();
        assert!(sweep.violation_count > 0);
        assert_eq!(sweep.violations.len(), 3);
    }

    #[test]
    fn spectral_bound_always_holds_and_kl_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in [2, 3, 5] {
            let w = normal_matrix(&mut rng, d, 8);
            let u = normal_matrix(&mut rng, 3, 8);
            let e = crate::rf::normal_vector(&mut rng, 3);
            let s = AdmissibleSampler::new(&w).unwrap();
            for _ in 0..300 {
                let delta = s.sample(&mut rng, 2.0, 1000).unwrap();
                let b = gap_bound(&delta, &w, &u, &e, 2.0).unwrap();
                assert!(b.kl_closed >= -1e-12);
                assert!(b.kl_closed <= b.kl_spectral_bound + 1e-9);
            }
        }
    }

    #[test]
    fn bound_monotone_in_radius() {
        let (delta, w, u, e) = diag_example();
        let mut prev = f64::NEG_INFINITY;
        for r in [0.5, 1.0, 2.0, 4.0] {
            let b = gap_bound(&delta, &w, &u, &e, r).unwrap().kl_eigen_bound;
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn zero_radius_sweep_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = normal_matrix(&mut rng, 2, 4);
        let u = normal_matrix(&mut rng, 2, 4);
        let e = DVector::from_vec(vec![1.0, 1.0]);
        let s = eigen_gap_sweep(&w, &u, &e, 0.0, 10, &mut rng, 1e-9, 1).unwrap();
        assert_eq!(s.max_kl, 0.0);
        assert_eq!(s.max_eigen_bound, 0.0);
        assert_eq!(s.violation_count, 0);
    }
}
