//! Random-feature score models under parameter perturbation: the induced
//! prior shift, its Gaussian closed form, the KL gap and its eigenvalue
//! bound, each paired with a brute-force oracle.

pub mod certify;
mod error;
pub mod gaussian;
pub mod perturbation;
pub mod probe;
pub mod rf;

pub use certify::{run_suite, CheckResult, SuiteConfig, SuiteReport};
pub use error::{Result, TheoryError};
pub use gaussian::{
    eigen_gap_sweep, gap_bound, gaussian_kl, normalization_constant, perturbed_gaussian, GapBound,
    GapSweep, PerturbedGaussian,
};
pub use perturbation::{
    exponent_gradient, loss_equality_check, perturbation_exponent, AdmissibleSampler, Perturbation,
    PerturbationDump,
};
pub use probe::{fit_to_standard_normal, perturbed_set_probe, flat_set_probe, ProbeReport};
pub use rf::{score_loss, standard_normal_score, FeatureActivation, RandomFeatureScoreModel};
