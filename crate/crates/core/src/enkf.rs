//! Ensemble statistics and the covariance-preconditioned gradient estimate.
//!
//! Given particles `x_k` with cached logits `f(x_k)`, the estimate of
//! `C_xx grad_x log p(c | x)` is
//!
//! ```text
//! g = (1/K) sum_k (x_k - x_mean) ((f(x_k) - f_mean) . (e_c - p))
//! ```
//!
//! which equals `C_xf (e_c - p)` and needs no derivative of `f`. It never
//! forms the `d x d` covariance; only the verification routines below do.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::{orthogonal_residual, orthonormal_basis};
use crate::models::{ClassIndex, Classifier, Logits, OracleClassifier, ProbVector};

/// Largest ambient dimension for which `C_xx` is materialized.
pub const MAX_MATERIALIZED_DIM: usize = 64;

/// Drop threshold for orthonormalizing particle deviations.
pub const SPAN_DROP_TOLERANCE: f64 = 1e-12;

/// Particles together with their cached classifier outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    particles: Vec<DVector<f64>>,
    logits: Vec<Logits>,
}

impl ParticleEnsemble {
    pub fn new(particles: Vec<DVector<f64>>, logits: Vec<Logits>) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::InvalidInput("ensemble has no particles".into()));
        }
        check_dim("ensemble logits count", particles.len(), logits.len())?;
        let d = particles[0].len();
        let n = logits[0].len();
        for (x, f) in particles.iter().zip(&logits) {
            check_dim("particle dimension", d, x.len())?;
            check_dim("logit dimension", n, f.len())?;
            check_finite("particle", x.as_slice())?;
        }
        Ok(Self { particles, logits })
    }

    /// Score every particle with `model`, in parallel.
    pub fn evaluate(model: &dyn Classifier, particles: Vec<DVector<f64>>) -> Result<Self> {
        let logits = particles
            .par_iter()
            .map(|x| model.eval(x))
            .collect::<Result<Vec<_>>>()?;
        Self::new(particles, logits)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    pub fn n_classes(&self) -> usize {
        self.logits[0].len()
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    pub fn logits(&self) -> &[Logits] {
        &self.logits
    }

    pub fn mean_x(&self) -> DVector<f64> {
        mean(self.particles.iter())
    }

    pub fn mean_f(&self) -> DVector<f64> {
        mean(self.logits.iter().map(|l| l.values()))
    }

    /// `x_k - x_mean` for every particle.
    pub fn deviations(&self) -> Vec<DVector<f64>> {
        let m = self.mean_x();
        self.particles.iter().map(|x| x - &m).collect()
    }

    /// Softmax of every cached logit vector.
    pub fn probabilities(&self) -> Vec<ProbVector> {
        self.logits.iter().map(Logits::softmax).collect()
    }

    /// True when every particle coincides with the first one.
    pub fn is_degenerate(&self) -> bool {
        let first = &self.particles[0];
        self.particles.iter().all(|x| x == first)
    }
}

fn mean<'a>(items: impl Iterator<Item = &'a DVector<f64>>) -> DVector<f64> {
    let mut count = 0usize;
    let mut acc: Option<DVector<f64>> = None;
    for x in items {
        count += 1;
        match acc.as_mut() {
            None => acc = Some(x.clone()),
            Some(a) => *a += x,
        }
    }
    acc.map(|a| a / count as f64).unwrap_or_else(|| DVector::zeros(0))
}

/// Means and `1/K`-normalized covariances of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean_x: DVector<f64>,
    pub mean_f: DVector<f64>,
    /// `d x d`.
    pub cov_xx: DMatrix<f64>,
    /// `d x n`.
    pub cov_xf: DMatrix<f64>,
}

pub fn ensemble_stats(e: &ParticleEnsemble) -> Result<EnsembleStats> {
    let d = e.dim();
    if d > MAX_MATERIALIZED_DIM {
        return Err(Error::InvalidInput(format!(
            "refusing to materialize a {d} x {d} covariance (limit {MAX_MATERIALIZED_DIM})"
        )));
    }
    let mean_x = e.mean_x();
    let mean_f = e.mean_f();
    let k = e.len() as f64;
    let mut cov_xx = DMatrix::zeros(d, d);
    let mut cov_xf = DMatrix::zeros(d, e.n_classes());
    for (x, f) in e.particles.iter().zip(&e.logits) {
        let dx = x - &mean_x;
        let df = f.values() - &mean_f;
        cov_xx.ger(1.0 / k, &dx, &dx, 1.0);
        cov_xf.ger(1.0 / k, &dx, &df, 1.0);
    }
    Ok(EnsembleStats {
        mean_x,
        mean_f,
        cov_xx,
        cov_xf,
    })
}

/// `e_c - p`: the gradient of `log p(y = c | f)` with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionWeight(DVector<f64>);

impl DirectionWeight {
    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

pub fn direction_weight(c: ClassIndex, p: &ProbVector) -> Result<DirectionWeight> {
    let c = ClassIndex::checked(c.index(), p.len())?;
    let mut w = -p.values().clone();
    w[c.index()] += 1.0;
    Ok(DirectionWeight(w))
}

/// Derivative-free, covariance-preconditioned estimate of
/// `grad_x log p(c | x)`, accumulated particle by particle in index order.
pub fn freemcg_gradient(
    e: &ParticleEnsemble,
    c: ClassIndex,
    p: &ProbVector,
) -> Result<DVector<f64>> {
    check_dim("probabilities vs ensemble logits", e.n_classes(), p.len())?;
    let w = direction_weight(c, p)?;
    Ok(weighted_cross_covariance(e, w.values()))
}

/// `C_xf w` without forming `C_xf`.
pub(crate) fn weighted_cross_covariance(e: &ParticleEnsemble, w: &DVector<f64>) -> DVector<f64> {
    let mean_x = e.mean_x();
    let mean_f = e.mean_f();
    let k = e.len() as f64;
    let mut g = DVector::zeros(e.dim());
    for (x, f) in e.particles.iter().zip(&e.logits) {
        let weight = (f.values() - &mean_f).dot(w);
        g.axpy(weight / k, &(x - &mean_x), 1.0);
    }
    g
}

/// `|| C_xf - C_xx J(x_mean)^T ||_F` against an analytic Jacobian.
pub fn thm2_residual(model: &dyn OracleClassifier, e: &ParticleEnsemble) -> Result<f64> {
    let stats = ensemble_stats(e)?;
    let jac = model.jacobian(&stats.mean_x)?;
    check_dim("jacobian rows", e.n_classes(), jac.nrows())?;
    Ok((&stats.cov_xf - &stats.cov_xx * jac.transpose()).norm())
}

/// Relative norm of the part of `C_xx b` lying outside the span of the
/// particle deviations. Returns 0 when `C_xx b` vanishes.
pub fn cov_action_span_check(e: &ParticleEnsemble, b: &DVector<f64>) -> Result<f64> {
    check_dim("span-check direction", e.dim(), b.len())?;
    let devs = e.deviations();
    let k = e.len() as f64;
    let mut action = DVector::zeros(e.dim());
    for dev in &devs {
        action.axpy(dev.dot(b) / k, dev, 1.0);
    }
    let norm = action.norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let basis = orthonormal_basis(&devs, SPAN_DROP_TOLERANCE);
    Ok(orthogonal_residual(&action, &basis).norm() / norm)
}
