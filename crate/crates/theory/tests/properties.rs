use flatdiff_theory::{
    gap_bound, gaussian_kl, normalization_constant, perturbed_gaussian, run_suite, AdmissibleSampler, Perturbation,
    RandomFeatureScoreModel, FeatureActivation, SuiteConfig,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn admissible_samples_stay_in_ball_and_symmetric(
        seed in any::<u64>(),
        d in 1usize..5,
        m in 1usize..9,
        radius in 0.01f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = RandomFeatureScoreModel::random(&mut rng, d, m, 3, FeatureActivation::Identity).unwrap();
        let sampler = match AdmissibleSampler::new(model.w()) {
            Ok(s) => s,
            Err(_) => return Ok(()),
        };
        let delta = sampler.sample(&mut rng, radius, 1000).unwrap();
        prop_assert!(delta.norm() <= radius * (1.0 + 1e-12));
        prop_assert!(delta.ensure_symmetric(model.w()).is_ok());

        let g = perturbed_gaussian(&delta, model.w(), model.u(), model.e()).unwrap();
        prop_assert!(gaussian_kl(&g) >= -1e-12);
        let b = gap_bound(&delta, model.w(), model.u(), model.e(), radius).unwrap();
        prop_assert!(b.kl_closed <= b.kl_spectral_bound + 1e-9, "{:?}", b);
    }

    #[test]
    fn zero_perturbation_is_the_standard_normal(d in 1usize..5, m in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = RandomFeatureScoreModel::random(&mut rng, d, m, 2, FeatureActivation::Identity).unwrap();
        let zero = Perturbation::zeros(d, m);
        let g = perturbed_gaussian(&zero, model.w(), model.u(), model.e()).unwrap();
        prop_assert_eq!(gaussian_kl(&g), 0.0);
        prop_assert_eq!(normalization_constant(&zero, model.w(), model.u(), model.e()).unwrap(), 0.0);
        prop_assert!(g.mu.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn stated_eigen_bound_has_a_one_dimensional_counterexample() {
    // d = m = 1, W = U = e = 1, δ = −½: Σ = 2, μ = 1, KL = ½ ln 2, while the
    // bound with σ_d in front of the mean term gives ≈ 0.159.
    let one = DMatrix::from_element(1, 1, 1.0);
    let delta = Perturbation {
        delta: DMatrix::from_element(1, 1, -0.5),
    };
    let b = gap_bound(&delta, &one, &one, &DVector::from_element(1, 1.0), 0.5).unwrap();
    assert!((b.kl_closed - 0.5 * 2f64.ln()).abs() < 1e-12);
    assert!(!b.holds(1e-9));
    assert!(b.kl_closed <= b.kl_spectral_bound);
}

#[test]
fn reduced_suite_passes() {
    let cfg = SuiteConfig {
        seed: 11,
        loss_instances: 12,
        density_instances: 4,
        grid: 200,
        kl_samples: 200_000,
        bound_samples: 100,
        sign_instances: 4,
        sign_samples: 100_000,
        ..SuiteConfig::default()
    };
    let report = run_suite(&cfg).unwrap();
    for c in &report.checks {
        assert!(c.passed, "{c:?}");
    }
    assert!(report.passed);
    assert!(report.violations.is_empty());
}
