//! Small synthetic problems with closed-form priors, used by the harness.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::attribution::SpatialLayout;
use crate::diffusion::GaussianMixturePrior;
use crate::error::{Error, Result};
use crate::models::{LinearSoftmax, RbfSoftmax};
use crate::rng::{Purpose, SeedStream};

/// Two isotropic Gaussian classes at `(-m, 0)` and `(m, 0)` with an RBF
/// classifier centered on the class means.
#[derive(Debug, Clone)]
pub struct TwoClassTask {
    pub prior: GaussianMixturePrior,
    pub model: RbfSoftmax,
    class_priors: Vec<GaussianMixturePrior>,
}

impl TwoClassTask {
    pub fn new(half_separation: f64, std: f64, bandwidth: f64) -> Result<Self> {
        let means = vec![
            DVector::from_column_slice(&[-half_separation, 0.0]),
            DVector::from_column_slice(&[half_separation, 0.0]),
        ];
        let prior = GaussianMixturePrior::isotropic(vec![0.5, 0.5], means.clone(), &[std, std])?;
        let class_priors = means
            .iter()
            .map(|m| GaussianMixturePrior::isotropic(vec![1.0], vec![m.clone()], &[std]))
            .collect::<Result<_>>()?;
        let centers = DMatrix::from_fn(2, 2, |c, j| means[c][j]);
        Ok(Self {
            prior,
            model: RbfSoftmax::new(centers, bandwidth)?,
            class_priors,
        })
    }

    /// Means at `(+-2, 0)`, class std 0.5, bandwidth 2.
    pub fn standard() -> Self {
        Self::new(2.0, 0.5, 2.0).expect("valid task")
    }

    pub fn class_prior(&self, c: usize) -> Result<&GaussianMixturePrior> {
        self.class_priors
            .get(c)
            .ok_or_else(|| Error::InvalidInput(format!("class {c} out of range for 2 classes")))
    }

    /// A draw from class `c`, reproducible per seed.
    pub fn input(&self, c: usize, seed: u64) -> Result<DVector<f64>> {
        let mut rng = SeedStream::new(seed).rng(Purpose::Sampling, c as u64, 0);
        Ok(self.class_prior(c)?.sample(&mut rng))
    }

    /// Median mixture log-density of `n` draws from class `c`.
    pub fn median_log_density(&self, c: usize, n: usize, seed: u64) -> Result<f64> {
        if n == 0 {
            return Err(Error::InvalidParameter("need at least one draw".into()));
        }
        let class = self.class_prior(c)?;
        let mut rng = SeedStream::new(seed).rng(Purpose::Sampling, u64::MAX, c as u64);
        let mut lds: Vec<f64> = (0..n).map(|_| self.prior.log_density(&class.sample(&mut rng))).collect();
        lds.sort_by(f64::total_cmp);
        Ok(if n % 2 == 1 {
            lds[n / 2]
        } else {
            0.5 * (lds[n / 2 - 1] + lds[n / 2])
        })
    }
}

pub const BLOB_SIDE: usize = 16;
pub const BLOB_WIDTH: f64 = 1.5;

/// Gaussian bump of unit height centered at `(row, col)` on the blob grid.
pub fn blob_image(row: f64, col: f64, width: f64) -> DVector<f64> {
    DVector::from_fn(BLOB_SIDE * BLOB_SIDE, |i, _| {
        let (r, c) = ((i / BLOB_SIDE) as f64, (i % BLOB_SIDE) as f64);
        (-((r - row).powi(2) + (c - col).powi(2)) / (2.0 * width * width)).exp()
    })
}

/// 16x16 grayscale images holding one blob: in the left half for class 0,
/// the right half for class 1, at one of four positions each. The prior is
/// an equal-weight mixture over the eight positions; the classifier is
/// linear with weights proportional to the mean blob of each class.
#[derive(Debug, Clone)]
pub struct BlobTask {
    pub prior: GaussianMixturePrior,
    pub model: LinearSoftmax,
    pub layout: SpatialLayout,
}

impl BlobTask {
    pub fn new(pixel_std: f64, gain: f64) -> Result<Self> {
        const POSITIONS: [[(f64, f64); 4]; 2] = [
            [(4.0, 3.0), (11.0, 3.0), (4.0, 6.0), (11.0, 6.0)],
            [(4.0, 9.0), (11.0, 9.0), (4.0, 12.0), (11.0, 12.0)],
        ];
        let means: Vec<_> = POSITIONS
            .iter()
            .flatten()
            .map(|&(r, c)| blob_image(r, c, BLOB_WIDTH))
            .collect();
        let d = BLOB_SIDE * BLOB_SIDE;
        let prior = GaussianMixturePrior::isotropic(vec![0.125; 8], means.clone(), &[pixel_std; 8])?;
        let weights = DMatrix::from_fn(2, d, |c, j| gain * (0..4).map(|i| means[c * 4 + i][j]).sum::<f64>() / 4.0);
        Ok(Self {
            prior,
            model: LinearSoftmax::new(weights, DVector::zeros(2))?,
            layout: SpatialLayout::grayscale(BLOB_SIDE, BLOB_SIDE),
        })
    }

    /// Pixel noise 0.05, gain 1.2 (predicted-class probability around 0.9).
    pub fn standard() -> Self {
        Self::new(0.05, 1.2).expect("valid task")
    }

    pub fn input(&self, seed: u64) -> DVector<f64> {
        self.prior.sample(&mut SeedStream::new(seed).rng(Purpose::Sampling, 0, 0))
    }

    /// Independent uniform pixel scores, the reference ranking for removal
    /// curves.
    pub fn random_scores(&self, seed: u64) -> DVector<f64> {
        let mut rng = SeedStream::new(seed).rng(Purpose::Custom(2), 0, 0);
        DVector::from_fn(self.layout.len(), |_, _| rng.random::<f64>())
    }
}
