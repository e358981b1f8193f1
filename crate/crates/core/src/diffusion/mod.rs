//! Variance schedules, forward noising, the ε-matching loss, respaced
//! ancestral sampling, toy targets and exact-score reference predictors.

mod data;
mod loss;
mod model;
mod sampler;
mod schedule;

pub use data::{DatasetKind, ToyDataset};
pub use loss::{diffusion_loss, NoisedBatch};
pub use model::{
    timestep_embedding, ActivationKind, AnalyticGaussianEps, Architecture, EpsModel, EpsPredictor,
    ZeroEps,
};
pub use sampler::{ddpm_sample, ddpm_sample_from, initial_latent, write_samples_csv, StepView};
pub use schedule::{
    forward_noise, forward_noise_with, linear_schedule, ChainStep, NoiseSchedule, RespacingMap,
    ScheduleDescriptor,
};
