//! Counterfactual generation: direct gradient ascent with the ensemble
//! gradient, and guided reverse diffusion from a partially noised input.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::denoised_particles;
use crate::diffusion::{
    ddim_grid, ddim_step, forward_diffuse, implied_eps, DdimParams, Denoiser, GuidanceScale,
    NoiseSchedule,
};
use crate::enkf::{direction_weight, freemcg_gradient, ParticleEnsemble};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::models::{predict, ClassIndex, Classifier, ProbVector};
use crate::rng::{Purpose, SeedStream};

/// Iterates whose norm exceeds this multiple of the input norm abort the run.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfMode {
    Ascent,
    Reverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfConfig {
    pub target_class: usize,
    /// Weight of the ensemble gradient.
    pub alpha: f64,
    /// Weight of the pull back towards the input.
    pub beta: f64,
    /// Forward-diffusion depth.
    pub t_start: usize,
    pub particles: usize,
    pub ddim: DdimParams,
    pub ddim_steps: usize,
    /// Ascent iterations (ignored by reverse diffusion).
    pub iters: usize,
    /// Rescale the ensemble gradient to unit norm before weighting it.
    pub grad_norm: bool,
    pub seed: u64,
}

impl CfConfig {
    /// Reverse-diffusion recipe: `t' = 400`, `alpha = 0.2`, `beta = 0.01`,
    /// 100 particles, 100 deterministic DDIM steps, normalized gradients.
    pub fn reverse(target_class: usize) -> Self {
        Self {
            target_class,
            alpha: 0.2,
            beta: 0.01,
            t_start: 400,
            particles: 100,
            ddim: DdimParams::new(0.0, GuidanceScale::Stabilized).expect("valid"),
            ddim_steps: 100,
            iters: 0,
            grad_norm: true,
            seed: 0,
        }
    }

    /// Direct-ascent recipe: 18 iterations at `t' = 300`, `alpha = 0.2`.
    pub fn ascent(target_class: usize) -> Self {
        Self {
            t_start: 300,
            iters: 18,
            grad_norm: false,
            ..Self::reverse(target_class)
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule, n_classes: usize) -> Result<()> {
        ClassIndex::checked(self.target_class, n_classes)?;
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.t_start == 0 || self.t_start >= schedule.steps() {
            return Err(Error::InvalidParameter(format!(
                "t_start {} outside (0, {})",
                self.t_start,
                schedule.steps()
            )));
        }
        if self.particles < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 particles, got {}",
                self.particles
            )));
        }
        DdimParams::new(self.ddim.eta, self.ddim.gamma)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualResult {
    pub x_cf: DVector<f64>,
    /// Ascent: every iterate including the start. Reverse: the mean
    /// denoised estimate at every step, then `x_cf`.
    pub trajectory: Vec<DVector<f64>>,
    /// Ascent: `f(x_i)`. Reverse: mean logits of the denoised particles.
    pub logit_history: Vec<DVector<f64>>,
    /// `e_c' - p` used at every step.
    pub direction_weights: Vec<DVector<f64>>,
    /// Reverse diffusion only; empty for ascent.
    pub final_particles: Vec<DVector<f64>>,
    pub predicted: ClassIndex,
    pub flipped: bool,
    pub l2: f64,
}

/// `g / ||g||`, or zero when `||g|| <= 1e-12`.
pub fn normalize_gradient(g: &DVector<f64>) -> DVector<f64> {
    let norm = g.norm();
    if norm > 1e-12 {
        g / norm
    } else {
        DVector::zeros(g.len())
    }
}

fn divergence_limit(x: &DVector<f64>) -> f64 {
    DIVERGENCE_FACTOR * x.norm().max(1.0)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: &dyn Classifier,
    x: &DVector<f64>,
    x_cf: DVector<f64>,
    target: ClassIndex,
    trajectory: Vec<DVector<f64>>,
    logit_history: Vec<DVector<f64>>,
    direction_weights: Vec<DVector<f64>>,
    final_particles: Vec<DVector<f64>>,
) -> Result<CounterfactualResult> {
    let predicted = predict(model, &x_cf)?;
    Ok(CounterfactualResult {
        l2: (&x_cf - x).norm(),
        flipped: predicted == target,
        predicted,
        x_cf,
        trajectory,
        logit_history,
        direction_weights,
        final_particles,
    })
}

fn check_inputs(
    model: &dyn Classifier,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x: &DVector<f64>,
    cfg: &CfConfig,
) -> Result<ClassIndex> {
    cfg.validate(schedule, model.dim_out())?;
    check_dim("counterfactual input", model.dim_in(), x.len())?;
    check_dim("denoiser dimension", model.dim_in(), denoiser.dim())?;
    check_finite("counterfactual input", x.as_slice())?;
    Ok(ClassIndex(cfg.target_class))
}

/// `x_{i+1} = x_i + alpha g(x_i) + beta (x - x_i)` starting from `x`.
pub fn ascent_cf(
    model: &dyn Classifier,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x: &DVector<f64>,
    cfg: &CfConfig,
) -> Result<CounterfactualResult> {
    ascent_cf_from(model, denoiser, schedule, x, x, cfg)
}

/// Ascent anchored at `x` but started from `start`.
pub fn ascent_cf_from(
    model: &dyn Classifier,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x: &DVector<f64>,
    start: &DVector<f64>,
    cfg: &CfConfig,
) -> Result<CounterfactualResult> {
    let target = check_inputs(model, denoiser, schedule, x, cfg)?;
    check_dim("ascent start", x.len(), start.len())?;
    let seeds = SeedStream::new(cfg.seed);
    let limit = divergence_limit(x);
    let ts = vec![cfg.t_start; cfg.particles];

    let mut xi = start.clone();
    let mut trajectory = vec![xi.clone()];
    let mut logit_history = Vec::with_capacity(cfg.iters + 1);
    let mut direction_weights = Vec::with_capacity(cfg.iters);
    for i in 0..cfg.iters {
        let logits = model.eval(&xi)?;
        let p = logits.softmax();
        logit_history.push(logits.into_inner());
        direction_weights.push(direction_weight(target, &p)?.into_inner());

        let mut g = if cfg.alpha == 0.0 {
            DVector::zeros(x.len())
        } else {
            let particles = denoised_particles(denoiser, schedule, &xi, &ts, &seeds, i as u64)?;
            let ensemble = ParticleEnsemble::evaluate(model, particles)?;
            freemcg_gradient(&ensemble, target, &p)?
        };
        if cfg.grad_norm {
            g = normalize_gradient(&g);
        }
        let next = &xi + g * cfg.alpha + (x - &xi) * cfg.beta;
        let norm = next.norm();
        if !norm.is_finite() || norm > limit {
            return Err(Error::Divergence { step: i, norm, limit });
        }
        xi = next;
        trajectory.push(xi.clone());
    }
    logit_history.push(model.eval(&xi)?.into_inner());
    finish(model, x, xi, target, trajectory, logit_history, direction_weights, Vec::new())
}

/// Guided reverse diffusion from `x` forward-diffused to `t_start`.
///
/// At every step the particles are denoised, one ensemble gradient is
/// computed from the denoised particles against the mean of their class
/// probabilities, and each particle moves by a DDIM step guided by
/// `alpha g + beta (x - x0_hat_k)`. Returns the mean of the final particles.
pub fn reverse_diffusion_cf(
    model: &dyn Classifier,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x: &DVector<f64>,
    cfg: &CfConfig,
) -> Result<CounterfactualResult> {
    let target = check_inputs(model, denoiser, schedule, x, cfg)?;
    let grid = ddim_grid(cfg.t_start, cfg.ddim_steps)?;
    let seeds = SeedStream::new(cfg.seed);
    let limit = divergence_limit(x);

    let mut particles: Vec<DVector<f64>> = (0..cfg.particles)
        .into_par_iter()
        .map(|k| {
            let mut rng = seeds.rng(Purpose::ForwardDiffuse, k as u64, cfg.t_start as u64);
            forward_diffuse(x, cfg.t_start, schedule, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut trajectory = Vec::with_capacity(grid.len() + 1);
    let mut logit_history = Vec::with_capacity(grid.len());
    let mut direction_weights = Vec::with_capacity(grid.len());
    for (i, step) in grid.iter().enumerate() {
        let a_t = schedule.alpha_bar(step.t);
        let denoised = particles
            .par_iter()
            .map(|xt| denoiser.denoise(xt, step.t, schedule))
            .collect::<Result<Vec<_>>>()?;
        let ensemble = ParticleEnsemble::evaluate(model, denoised)?;
        let p_mean = ProbVector::mean(ensemble.probabilities().iter())?;
        direction_weights.push(direction_weight(target, &p_mean)?.into_inner());
        logit_history.push(ensemble.mean_f());
        trajectory.push(ensemble.mean_x());

        let mut g_free = if cfg.alpha == 0.0 {
            DVector::zeros(x.len())
        } else {
            freemcg_gradient(&ensemble, target, &p_mean)?
        };
        if cfg.grad_norm {
            g_free = normalize_gradient(&g_free);
        }
        let g_free = g_free * cfg.alpha;

        particles = particles
            .par_iter()
            .zip(ensemble.particles().par_iter())
            .enumerate()
            .map(|(k, (xt, x0_hat))| {
                let eps_hat = implied_eps(xt, x0_hat, a_t);
                let guidance = &g_free + (x - x0_hat) * cfg.beta;
                let mut rng = seeds.rng(Purpose::DdimNoise, k as u64, step.t as u64);
                ddim_step(x0_hat, &eps_hat, *step, schedule, &cfg.ddim, Some(&guidance), &mut rng)
            })
            .collect::<Result<_>>()?;
        if let Some(norm) = particles.iter().map(|p| p.norm()).find(|n| !n.is_finite() || *n > limit) {
            return Err(Error::Divergence { step: i, norm, limit });
        }
    }

    let mut x_cf = DVector::zeros(x.len());
    for p in &particles {
        x_cf += p;
    }
    x_cf /= particles.len() as f64;
    trajectory.push(x_cf.clone());
    finish(model, x, x_cf, target, trajectory, logit_history, direction_weights, particles)
}

/// Dispatch on `mode`.
pub fn generate(
    mode: CfMode,
    model: &dyn Classifier,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x: &DVector<f64>,
    cfg: &CfConfig,
) -> Result<CounterfactualResult> {
    match mode {
        CfMode::Ascent => ascent_cf(model, denoiser, schedule, x, cfg),
        CfMode::Reverse => reverse_diffusion_cf(model, denoiser, schedule, x, cfg),
    }
}
