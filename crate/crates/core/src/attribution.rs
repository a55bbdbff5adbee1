//! Feature attribution from denoised particle ensembles, plus simple
//! gradient baselines used by the evaluation harness.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, Denoiser, NoiseSchedule};
use crate::enkf::{direction_weight, freemcg_gradient, ParticleEnsemble};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::models::{
    finite_difference_jacobian, oracle_log_prob_gradient, ClassIndex, Classifier,
    OracleClassifier,
};
use crate::rng::{Purpose, SeedStream};

/// Channel-first spatial layout `(channels, height, width)` of a flattened
/// input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl SpatialLayout {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn grayscale(height: usize, width: usize) -> Self {
        Self::new(1, height, width)
    }

    /// A plain vector, viewed as one row of single-channel pixels.
    pub fn flat(len: usize) -> Self {
        Self::new(1, 1, len)
    }

    /// Interpret an array shape: `[d]`, `[h, w]`, or `[c, h, w]`.
    pub fn from_shape(shape: &[usize]) -> Result<Self> {
        match *shape {
            [d] => Ok(Self::flat(d)),
            [h, w] => Ok(Self::grayscale(h, w)),
            [c, h, w] => Ok(Self::new(c, h, w)),
            _ => Err(Error::InvalidInput(format!(
                "unsupported input shape {shape:?}; expected 1 to 3 dimensions"
            ))),
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.pixels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Nonnegative per-pixel importance, plus the signed per-coordinate
/// gradient it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// `height x width`, row-major.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub raw_gradient: DVector<f64>,
    /// Set when every denoised ensemble collapsed to a single point.
    pub degenerate: bool,
}

impl AttributionMap {
    /// Rescale so the largest value is 1 (no-op on an all-zero map).
    pub fn max_normalized(&self) -> AttributionMap {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        let mut out = self.clone();
        if max > 0.0 {
            out.values.iter_mut().for_each(|v| *v /= max);
        }
        out
    }
}

/// Channel mean followed by absolute value.
pub fn postprocess(raw: &DVector<f64>, layout: SpatialLayout) -> Result<AttributionMap> {
    check_dim("attribution layout", layout.len(), raw.len())?;
    let pixels = layout.pixels();
    let values = (0..pixels)
        .map(|p| {
            let sum: f64 = (0..layout.channels).map(|c| raw[c * pixels + p]).sum();
            (sum / layout.channels as f64).abs()
        })
        .collect();
    Ok(AttributionMap {
        values,
        height: layout.height,
        width: layout.width,
        raw_gradient: raw.clone(),
        degenerate: false,
    })
}

/// How particle timesteps are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TimestepSampling {
    /// `particles_per_t` particles at every listed timestep; per-timestep
    /// gradients are averaged uniformly.
    Grid,
    /// One ensemble of `timesteps.len() * particles_per_t` particles, each
    /// at a timestep drawn uniformly from `[min, max]` of the list.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub timesteps: Vec<usize>,
    pub particles_per_t: usize,
    pub seed: u64,
    /// Defaults to the predicted class.
    pub target_class: Option<usize>,
    pub sampling: TimestepSampling,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![100, 200, 300, 400, 500, 600, 700],
            particles_per_t: 100,
            seed: 0,
            target_class: None,
            sampling: TimestepSampling::Grid,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.timesteps.is_empty() {
            return Err(Error::InvalidParameter("no attribution timesteps given".into()));
        }
        for &t in &self.timesteps {
            schedule.check_timestep(t)?;
        }
        if self.particles_per_t < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 particles per timestep, got {}",
                self.particles_per_t
            )));
        }
        Ok(())
    }
}

/// One denoised particle per entry of `timesteps`: forward-diffuse `x` to
/// that timestep, then Tweedie-denoise. Particle `k` draws from the stream
/// `(ForwardDiffuse, k, stream_step)`.
pub(crate) fn denoised_particles(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x: &DVector<f64>,
    timesteps: &[usize],
    seeds: &SeedStream,
    stream_step: u64,
) -> Result<Vec<DVector<f64>>> {
    timesteps
        .par_iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut rng = seeds.rng(Purpose::ForwardDiffuse, k as u64, stream_step);
            let x_t = forward_diffuse(x, t, schedule, &mut rng)?;
            denoiser.denoise(&x_t, t, schedule)
        })
        .collect()
}

/// Attribution map of `model` at `x`, from ensembles of denoised particles.
pub fn attribute(
    model: &dyn Classifier,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x: &DVector<f64>,
    layout: SpatialLayout,
    cfg: &AttributionConfig,
) -> Result<AttributionMap> {
    cfg.validate(schedule)?;
    check_dim("attribution input", model.dim_in(), x.len())?;
    check_dim("denoiser dimension", model.dim_in(), denoiser.dim())?;
    check_dim("attribution layout", layout.len(), x.len())?;
    check_finite("attribution input", x.as_slice())?;

    let p = model.eval(x)?.softmax();
    let predicted = p.argmax();
    let c = match cfg.target_class {
        Some(c) => ClassIndex::checked(c, model.dim_out())?,
        None => predicted,
    };
    if c == predicted {
        let w = direction_weight(c, &p)?;
        debug_assert!(w
            .values()
            .iter()
            .enumerate()
            .all(|(i, &wi)| if i == c.index() { wi >= 0.0 } else { wi <= 0.0 }));
    }

    let seeds = SeedStream::new(cfg.seed);
    let mut degenerate = true;
    let raw = match cfg.sampling {
        TimestepSampling::Grid => {
            let mut acc = DVector::zeros(x.len());
            for &t in &cfg.timesteps {
                let ts = vec![t; cfg.particles_per_t];
                let particles = denoised_particles(denoiser, schedule, x, &ts, &seeds, t as u64)?;
                let ensemble = ParticleEnsemble::evaluate(model, particles)?;
                degenerate &= ensemble.is_degenerate();
                acc += freemcg_gradient(&ensemble, c, &p)?;
            }
            acc / cfg.timesteps.len() as f64
        }
        TimestepSampling::Random => {
            let lo = *cfg.timesteps.iter().min().expect("validated nonempty");
            let hi = *cfg.timesteps.iter().max().expect("validated nonempty");
            let total = cfg.timesteps.len() * cfg.particles_per_t;
            let ts: Vec<usize> = (0..total)
                .map(|k| {
                    seeds
                        .rng(Purpose::TimestepDraw, k as u64, 0)
                        .random_range(lo..=hi)
                })
                .collect();
            let particles = denoised_particles(denoiser, schedule, x, &ts, &seeds, u64::MAX)?;
            let ensemble = ParticleEnsemble::evaluate(model, particles)?;
            degenerate = ensemble.is_degenerate();
            freemcg_gradient(&ensemble, c, &p)?
        }
    };

    if degenerate {
        let mut map = postprocess(&DVector::zeros(x.len()), layout)?;
        map.degenerate = true;
        return Ok(map);
    }
    postprocess(&raw, layout)
}

/// `|grad_x log softmax(f(x))_c|` from the analytic Jacobian.
pub fn baseline_vanilla_gradient(
    model: &dyn OracleClassifier,
    x: &DVector<f64>,
    c: ClassIndex,
    layout: SpatialLayout,
) -> Result<AttributionMap> {
    let g = log_prob_gradient(model, x, c)?;
    postprocess(&g, layout)
}

/// `|x * grad_x log softmax(f(x))_c|`.
pub fn baseline_input_x_gradient(
    model: &dyn OracleClassifier,
    x: &DVector<f64>,
    c: ClassIndex,
    layout: SpatialLayout,
) -> Result<AttributionMap> {
    let g = log_prob_gradient(model, x, c)?;
    postprocess(&x.component_mul(&g), layout)
}

fn log_prob_gradient(
    model: &dyn OracleClassifier,
    x: &DVector<f64>,
    c: ClassIndex,
) -> Result<DVector<f64>> {
    let c = ClassIndex::checked(c.index(), model.dim_out())?;
    let p = model.eval(x)?.softmax();
    oracle_log_prob_gradient(&model.jacobian(x)?, &p, c)
}

/// Where integrated-gradient path derivatives come from.
#[derive(Clone, Copy)]
pub enum GradientSource<'a> {
    Oracle(&'a dyn OracleClassifier),
    /// Central finite differences with the given step.
    BlackBox(&'a dyn Classifier, f64),
}

impl GradientSource<'_> {
    fn model(&self) -> &dyn Classifier {
        match *self {
            GradientSource::Oracle(m) => m,
            GradientSource::BlackBox(m, _) => m,
        }
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<nalgebra::DMatrix<f64>> {
        match *self {
            GradientSource::Oracle(m) => m.jacobian(x),
            GradientSource::BlackBox(m, h) => finite_difference_jacobian(m, x, h),
        }
    }
}

/// Which scalar output is integrated along the path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IgTarget {
    Logit,
    LogProb,
}

pub const MIN_IG_STEPS: usize = 8;

/// Integrated gradients along the straight path from `baseline` to `x`,
/// with a midpoint Riemann sum over `steps` segments.
pub fn baseline_integrated_gradients(
    source: GradientSource<'_>,
    x: &DVector<f64>,
    c: ClassIndex,
    steps: usize,
    baseline: &DVector<f64>,
    target: IgTarget,
    layout: SpatialLayout,
) -> Result<AttributionMap> {
    if steps < MIN_IG_STEPS {
        return Err(Error::InvalidParameter(format!(
            "integrated gradients needs at least {MIN_IG_STEPS} steps, got {steps}"
        )));
    }
    let model = source.model();
    check_dim("integrated gradients input", model.dim_in(), x.len())?;
    check_dim("integrated gradients baseline", x.len(), baseline.len())?;
    let c = ClassIndex::checked(c.index(), model.dim_out())?;
    let delta = x - baseline;
    let mut avg = DVector::zeros(x.len());
    for i in 0..steps {
        let point = baseline + &delta * ((i as f64 + 0.5) / steps as f64);
        let jac = source.jacobian(&point)?;
        let g = match target {
            IgTarget::Logit => jac.row(c.index()).transpose(),
            IgTarget::LogProb => {
                let p = model.eval(&point)?.softmax();
                oracle_log_prob_gradient(&jac, &p, c)?
            }
        };
        avg += g;
    }
    avg /= steps as f64;
    postprocess(&delta.component_mul(&avg), layout)
}
