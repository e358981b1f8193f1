//! Robustness instruments: direct post-training quantization, exposure-bias
//! profiles, adversarial initial latents, two-sample distances standing in
//! for image-quality scores, and the quantization/respacing sweep.

mod attack;
mod distance;
mod exposure;
mod quantize;
mod sweep;

pub use attack::{latent_attack, latent_attack_loss, AttackConfig};
pub use distance::{distance, mmd_rbf, sliced_w2, DistanceMetric, DistanceReport};
pub use exposure::{exposure_profile, write_profile_csv, EpsNormProfile, ProfileRow};
pub use quantize::{quantize, quantize_codes, segment_scale, QuantSpec, QuantizedSegment};
pub use sweep::{robustness_sweep, write_sweep_csv, SweepConfig, SweepRow};
