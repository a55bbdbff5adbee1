use nalgebra::DVector;
use rand::Rng;

use super::denoiser::{implied_eps, Denoiser};
use super::schedule::{posterior_std, NoiseSchedule};
use crate::error::{check_dim, Error, Result};
use crate::rng::{standard_normal, Purpose, SeedStream};

/// Per-step guidance multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceScale {
    /// `sqrt(a_t * a_prev)`.
    Stabilized,
    Constant(f64),
}

impl GuidanceScale {
    pub fn at(&self, alpha_bar_t: f64, alpha_bar_prev: f64) -> f64 {
        match *self {
            GuidanceScale::Stabilized => stabilized_gamma(alpha_bar_t, alpha_bar_prev),
            GuidanceScale::Constant(g) => g,
        }
    }
}

pub fn stabilized_gamma(alpha_bar_t: f64, alpha_bar_prev: f64) -> f64 {
    (alpha_bar_t * alpha_bar_prev).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimParams {
    pub eta: f64,
    pub gamma: GuidanceScale,
}

impl DdimParams {
    pub fn new(eta: f64, gamma: GuidanceScale) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidParameter(format!("eta {eta} outside [0, 1]")));
        }
        if let GuidanceScale::Constant(g) = gamma {
            if !g.is_finite() {
                return Err(Error::InvalidParameter("guidance scale must be finite".into()));
            }
        }
        Ok(Self { eta, gamma })
    }

    pub fn deterministic() -> Self {
        Self {
            eta: 0.0,
            gamma: GuidanceScale::Stabilized,
        }
    }
}

impl Default for DdimParams {
    fn default() -> Self {
        Self::deterministic()
    }
}

/// One transition of a (possibly strided) DDIM chain: from timestep `t` to
/// `prev`, where `None` means clean data (`alpha_bar = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DdimTransition {
    pub t: usize,
    pub prev: Option<usize>,
}

/// Uniform sub-grid of `n_steps` timesteps from `t_start` down towards zero,
/// as transitions ending in clean data.
pub fn ddim_grid(t_start: usize, n_steps: usize) -> Result<Vec<DdimTransition>> {
    if n_steps == 0 {
        return Err(Error::InvalidParameter("DDIM needs at least one step".into()));
    }
    if n_steps > t_start + 1 {
        return Err(Error::InvalidParameter(format!(
            "{n_steps} DDIM steps do not fit below timestep {t_start}"
        )));
    }
    // tau_i = round(i * t_start / n_steps), i = n..1; distinct because the
    // stride is at least one.
    let taus: Vec<usize> = (1..=n_steps)
        .rev()
        .map(|i| ((i as f64) * t_start as f64 / n_steps as f64).round() as usize)
        .collect();
    let mut out = Vec::with_capacity(n_steps);
    for (k, &t) in taus.iter().enumerate() {
        out.push(DdimTransition {
            t,
            prev: taus.get(k + 1).copied(),
        });
    }
    Ok(out)
}

/// DDIM update with additive guidance:
///
/// `x_prev = sqrt(a_prev) x0_hat + sqrt(1 - a_prev - eta^2 b^2) eps_hat
///           + eta b eps + gamma g`,
///
/// where `b` is the posterior std between `a_t` and `a_prev`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<R: Rng + ?Sized>(
    x0_hat: &DVector<f64>,
    eps_hat: &DVector<f64>,
    step: DdimTransition,
    schedule: &NoiseSchedule,
    params: &DdimParams,
    guidance: Option<&DVector<f64>>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    schedule.check_timestep(step.t)?;
    if let Some(p) = step.prev {
        schedule.check_timestep(p)?;
        if p >= step.t {
            return Err(Error::InvalidParameter(format!(
                "DDIM step must go backwards, got {} -> {p}",
                step.t
            )));
        }
    }
    check_dim("DDIM noise estimate", x0_hat.len(), eps_hat.len())?;
    let a_t = schedule.alpha_bar(step.t);
    let a_prev = schedule.alpha_bar_or_clean(step.prev);
    let b = posterior_std(a_t, a_prev);
    let noise_var = params.eta * params.eta * b * b;
    let mut radicand = 1.0 - a_prev - noise_var;
    if radicand < 0.0 {
        if radicand < -1e-12 {
            return Err(Error::InvalidParameter(format!(
                "DDIM radicand is negative ({radicand:.3e}) at t = {}",
                step.t
            )));
        }
        radicand = 0.0;
    }
    let mut out = x0_hat * a_prev.sqrt() + eps_hat * radicand.sqrt();
    if params.eta > 0.0 {
        let noise = standard_normal(rng, x0_hat.len());
        out.axpy(params.eta * b, &noise, 1.0);
    }
    if let Some(g) = guidance {
        check_dim("DDIM guidance", x0_hat.len(), g.len())?;
        out.axpy(params.gamma.at(a_t, a_prev), g, 1.0);
    }
    Ok(out)
}

/// Unguided DDIM reverse pass from `x_start` at `grid[0].t`.
pub fn ddim_sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x_start: &DVector<f64>,
    grid: &[DdimTransition],
    params: &DdimParams,
    seeds: &SeedStream,
    particle: u64,
) -> Result<DVector<f64>> {
    let mut x = x_start.clone();
    for step in grid {
        let x0_hat = denoiser.denoise(&x, step.t, schedule)?;
        let eps_hat = implied_eps(&x, &x0_hat, schedule.alpha_bar(step.t));
        let mut rng = seeds.rng(Purpose::DdimNoise, particle, step.t as u64);
        x = ddim_step(&x0_hat, &eps_hat, *step, schedule, params, None, &mut rng)?;
    }
    Ok(x)
}
