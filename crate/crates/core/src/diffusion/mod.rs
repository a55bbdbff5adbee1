//! Variance-preserving diffusion machinery: the noise schedule, Tweedie
//! denoisers for analytic priors, and the guided DDIM update.

mod ddim;
mod denoiser;
mod schedule;

pub use ddim::{
    ddim_grid, ddim_sample, ddim_step, stabilized_gamma, DdimParams, DdimTransition,
    GuidanceScale,
};
pub use denoiser::{
    gmm_denoise, implied_eps, subspace_denoise, AffineSubspacePrior, BuiltinPrior, Denoiser,
    GaussianMixturePrior, PriorFile,
};
pub use schedule::{forward_diffuse, posterior_std, NoiseSchedule};
