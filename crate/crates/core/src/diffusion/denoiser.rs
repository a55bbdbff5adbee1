use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{check_dim, check_finite, Error, Result};
use crate::rng::standard_normal;

/// Posterior-mean map `(x_t, t) -> E[x_0 | x_t]`.
///
/// Implementations must be pure; particles are denoised in parallel.
/// Closed-form priors are provided here; anything else (a tabulated or
/// learned denoiser) plugs in through this trait.
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    fn denoise(&self, x_t: &DVector<f64>, t: usize, schedule: &NoiseSchedule)
        -> Result<DVector<f64>>;

    /// Noise estimate consistent with the denoised mean:
    /// `(x_t - sqrt(a_t) x0_hat) / sqrt(1 - a_t)`.
    fn implied_eps(
        &self,
        x_t: &DVector<f64>,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<DVector<f64>> {
        let x0_hat = self.denoise(x_t, t, schedule)?;
        Ok(implied_eps(x_t, &x0_hat, schedule.alpha_bar(t)))
    }
}

pub fn implied_eps(x_t: &DVector<f64>, x0_hat: &DVector<f64>, alpha_bar: f64) -> DVector<f64> {
    (x_t - x0_hat * alpha_bar.sqrt()) / (1.0 - alpha_bar).sqrt()
}

fn rescaled_observation(
    x_t: &DVector<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(DVector<f64>, f64)> {
    schedule.check_timestep(t)?;
    check_finite("noisy sample", x_t.as_slice())?;
    let a = schedule.alpha_bar(t);
    let sigma = schedule.sigma(t);
    Ok((x_t / a.sqrt(), sigma * sigma))
}

#[derive(Debug, Clone, PartialEq)]
struct Component {
    weight: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    // Eigenbasis of the covariance, columns are eigenvectors.
    basis: DMatrix<f64>,
    spectrum: DVector<f64>,
}

/// Finite mixture of (possibly degenerate) Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixturePrior {
    components: Vec<Component>,
    dim: usize,
}

impl GaussianMixturePrior {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        }
        check_dim("mixture means", weights.len(), means.len())?;
        check_dim("mixture covariances", weights.len(), covariances.len())?;
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidParameter("mixture dimension must be >= 1".into()));
        }
        let mut components = Vec::with_capacity(weights.len());
        for (j, ((weight, mean), cov)) in weights.into_iter().zip(means).zip(covariances).enumerate() {
            check_dim("mixture mean", dim, mean.len())?;
            check_dim("mixture covariance rows", dim, cov.nrows())?;
            check_dim("mixture covariance cols", dim, cov.ncols())?;
            check_finite("mixture mean", mean.as_slice())?;
            check_finite("mixture covariance", cov.as_slice())?;
            if (&cov - cov.transpose()).amax() > 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "covariance {j} is not symmetric"
                )));
            }
            let eig = SymmetricEigen::new(cov.clone());
            let scale = eig.eigenvalues.amax().max(1.0);
            if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
                return Err(Error::InvalidParameter(format!(
                    "covariance {j} is not positive semidefinite"
                )));
            }
            components.push(Component {
                weight,
                mean,
                covariance: cov,
                basis: eig.eigenvectors,
                spectrum: eig.eigenvalues.map(|l| l.max(0.0)),
            });
        }
        Ok(Self { components, dim })
    }

    /// Mixture of isotropic Gaussians `N(mu_j, s_j^2 I)`.
    pub fn isotropic(weights: Vec<f64>, means: Vec<DVector<f64>>, stds: &[f64]) -> Result<Self> {
        let dim = means.first().map_or(0, |m| m.len());
        let covs = stds
            .iter()
            .map(|s| DMatrix::identity(dim, dim) * (s * s))
            .collect();
        Self::new(weights, means, covs)
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.components[j].weight
    }

    pub fn mean(&self, j: usize) -> &DVector<f64> {
        &self.components[j].mean
    }

    pub fn covariance(&self, j: usize) -> &DMatrix<f64> {
        &self.components[j].covariance
    }

    /// Log of `N(u; mu_j, Sigma_j + s2 I)` per component, plus the
    /// per-component posterior means of `x_0`.
    fn component_posteriors(&self, u: &DVector<f64>, s2: f64) -> (Vec<f64>, Vec<DVector<f64>>) {
        let log_2pi = (2.0 * std::f64::consts::PI).ln();
        self.components
            .iter()
            .map(|c| {
                let z = c.basis.tr_mul(&(u - &c.mean));
                let mut quad = 0.0;
                let mut log_det = 0.0;
                let mut shrunk = DVector::zeros(z.len());
                for i in 0..z.len() {
                    let v = c.spectrum[i] + s2;
                    quad += z[i] * z[i] / v;
                    log_det += v.ln();
                    shrunk[i] = z[i] * c.spectrum[i] / v;
                }
                let log_w = if c.weight > 0.0 { c.weight.ln() } else { f64::NEG_INFINITY };
                let log_lik = log_w - 0.5 * (quad + log_det + z.len() as f64 * log_2pi);
                (log_lik, &c.mean + &c.basis * shrunk)
            })
            .unzip()
    }

    /// Posterior component responsibilities for a rescaled observation with
    /// noise variance `s2`.
    pub fn responsibilities(&self, u: &DVector<f64>, s2: f64) -> Vec<f64> {
        let (log_liks, _) = self.component_posteriors(u, s2);
        normalize_log_weights(&log_liks)
    }

    /// Log-density of the prior itself. Degenerate components contribute
    /// only on their support, so a tiny floor variance is used.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let (log_liks, _) = self.component_posteriors(x, 1e-300);
        log_sum_exp(&log_liks)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let j = self.sample_component(rng);
        self.sample_from(j, rng)
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let r: f64 = rng.random();
        let mut acc = 0.0;
        for (j, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if r < acc {
                return j;
            }
        }
        self.components.len() - 1
    }

    pub fn sample_from<R: Rng + ?Sized>(&self, j: usize, rng: &mut R) -> DVector<f64> {
        let c = &self.components[j];
        let n = standard_normal(rng, self.dim);
        &c.mean + &c.basis * n.component_mul(&c.spectrum.map(f64::sqrt))
    }

    /// First and second moments `(E[x], E[x x^T])`.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let mut mean = DVector::zeros(self.dim);
        let mut second = DMatrix::zeros(self.dim, self.dim);
        for c in &self.components {
            mean += &c.mean * c.weight;
            second += (&c.covariance + &c.mean * c.mean.transpose()) * c.weight;
        }
        (mean, second)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn normalize_log_weights(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Closed-form Tweedie denoiser of a Gaussian mixture.
///
/// With `u = x_t / sqrt(a_t)` and `s2 = sigma_t^2` the result is
/// `sum_j r_j(u) [mu_j + Sigma_j (Sigma_j + s2 I)^-1 (u - mu_j)]`.
pub fn gmm_denoise(
    x_t: &DVector<f64>,
    t: usize,
    prior: &GaussianMixturePrior,
    schedule: &NoiseSchedule,
) -> Result<DVector<f64>> {
    check_dim("gmm denoiser input", prior.dim, x_t.len())?;
    let (u, s2) = rescaled_observation(x_t, t, schedule)?;
    let (log_liks, means) = prior.component_posteriors(&u, s2);
    let r = normalize_log_weights(&log_liks);
    let mut out = DVector::zeros(prior.dim);
    for (rj, mj) in r.iter().zip(&means) {
        out.axpy(*rj, mj, 1.0);
    }
    check_finite("gmm posterior mean", out.as_slice())
        .map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(out)
}

impl Denoiser for GaussianMixturePrior {
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, x_t: &DVector<f64>, t: usize, schedule: &NoiseSchedule) -> Result<DVector<f64>> {
        gmm_denoise(x_t, t, self, schedule)
    }
}

/// Gaussian prior supported on the affine subspace `o + span(B)`.
///
/// `latent_covariance = None` is the flat (infinite-variance) limit, where
/// denoising is exactly the orthogonal projection onto the subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSubspacePrior {
    origin: DVector<f64>,
    basis: DMatrix<f64>,
    latent_covariance: Option<DMatrix<f64>>,
}

impl AffineSubspacePrior {
    pub fn new(
        origin: DVector<f64>,
        basis: DMatrix<f64>,
        latent_covariance: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let (d, m) = basis.shape();
        check_dim("subspace origin", d, origin.len())?;
        if m == 0 || m >= d {
            return Err(Error::InvalidParameter(format!(
                "subspace dimension {m} must be in [1, {d})"
            )));
        }
        check_finite("subspace origin", origin.as_slice())?;
        check_finite("subspace basis", basis.as_slice())?;
        let gram = basis.tr_mul(&basis);
        if (gram - DMatrix::identity(m, m)).amax() > 1e-10 {
            return Err(Error::InvalidParameter("subspace basis is not orthonormal".into()));
        }
        if let Some(cov) = &latent_covariance {
            check_dim("latent covariance rows", m, cov.nrows())?;
            check_dim("latent covariance cols", m, cov.ncols())?;
            check_finite("latent covariance", cov.as_slice())?;
            if (cov - cov.transpose()).amax() > 1e-12 {
                return Err(Error::InvalidParameter("latent covariance is not symmetric".into()));
            }
            if SymmetricEigen::new(cov.clone()).eigenvalues.iter().any(|&l| l < -1e-10) {
                return Err(Error::InvalidParameter(
                    "latent covariance is not positive semidefinite".into(),
                ));
            }
        }
        Ok(Self {
            origin,
            basis,
            latent_covariance,
        })
    }

    /// Orthonormalize the columns of `spanning` (modified Gram-Schmidt) and
    /// build the prior on `origin + span(spanning)`.
    pub fn from_spanning_set(
        origin: DVector<f64>,
        spanning: &DMatrix<f64>,
        latent_covariance: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let columns: Vec<DVector<f64>> = spanning.column_iter().map(|c| c.into_owned()).collect();
        let ortho = crate::linalg::orthonormal_basis(&columns, 1e-12);
        if ortho.len() != columns.len() {
            return Err(Error::InvalidParameter("spanning set is rank deficient".into()));
        }
        Self::new(origin, DMatrix::from_columns(&ortho), latent_covariance)
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn origin(&self) -> &DVector<f64> {
        &self.origin
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn latent_covariance(&self) -> Option<&DMatrix<f64>> {
        self.latent_covariance.as_ref()
    }

    /// `(I - B B^T) v`.
    pub fn normal_component(&self, v: &DVector<f64>) -> DVector<f64> {
        v - &self.basis * self.basis.tr_mul(v)
    }

    /// `o + B B^T (x - o)`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.origin + &self.basis * self.basis.tr_mul(&(x - &self.origin))
    }

    /// Draw `o + B z`, `z ~ N(0, Lambda)` (unit latent covariance in the
    /// flat limit).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let m = self.latent_dim();
        let n = standard_normal(rng, m);
        let z = match &self.latent_covariance {
            None => n,
            Some(cov) => {
                let eig = SymmetricEigen::new(cov.clone());
                &eig.eigenvectors * n.component_mul(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
            }
        };
        &self.origin + &self.basis * z
    }

    /// The same prior written as a rank-`m` Gaussian in the ambient space.
    pub fn to_gaussian_mixture(&self) -> Result<GaussianMixturePrior> {
        let cov = self.latent_covariance.as_ref().ok_or_else(|| {
            Error::InvalidParameter("the flat subspace prior has no ambient Gaussian form".into())
        })?;
        let ambient = &self.basis * cov * self.basis.transpose();
        let ambient = (&ambient + ambient.transpose()) * 0.5;
        GaussianMixturePrior::new(vec![1.0], vec![self.origin.clone()], vec![ambient])
    }
}

/// Tweedie denoiser of an affine-subspace Gaussian, via the latent formula
/// `o + B Lambda (Lambda + s2 I)^-1 B^T (u - o)`.
pub fn subspace_denoise(
    x_t: &DVector<f64>,
    t: usize,
    prior: &AffineSubspacePrior,
    schedule: &NoiseSchedule,
) -> Result<DVector<f64>> {
    check_dim("subspace denoiser input", prior.dim(), x_t.len())?;
    let (u, s2) = rescaled_observation(x_t, t, schedule)?;
    let coords = prior.basis.tr_mul(&(u - &prior.origin));
    let latent = match &prior.latent_covariance {
        None => coords,
        Some(cov) => {
            let m = prior.latent_dim();
            let shifted = cov + DMatrix::identity(m, m) * s2;
            let chol = shifted.cholesky().ok_or_else(|| {
                Error::Numerical("latent covariance plus noise is not positive definite".into())
            })?;
            cov * chol.solve(&coords)
        }
    };
    Ok(&prior.origin + &prior.basis * latent)
}

impl Denoiser for AffineSubspacePrior {
    fn dim(&self) -> usize {
        AffineSubspacePrior::dim(self)
    }

    fn denoise(&self, x_t: &DVector<f64>, t: usize, schedule: &NoiseSchedule) -> Result<DVector<f64>> {
        subspace_denoise(x_t, t, self, schedule)
    }
}

/// Either closed-form prior, as loaded from a prior file.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinPrior {
    Gmm(GaussianMixturePrior),
    Subspace(AffineSubspacePrior),
}

impl Denoiser for BuiltinPrior {
    fn dim(&self) -> usize {
        match self {
            Self::Gmm(p) => p.dim,
            Self::Subspace(p) => p.dim(),
        }
    }

    fn denoise(&self, x_t: &DVector<f64>, t: usize, schedule: &NoiseSchedule) -> Result<DVector<f64>> {
        match self {
            Self::Gmm(p) => gmm_denoise(x_t, t, p, schedule),
            Self::Subspace(p) => subspace_denoise(x_t, t, p, schedule),
        }
    }
}

/// On-disk prior description. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorFile {
    Gmm {
        dim: usize,
        weights: Vec<f64>,
        /// `n_components x dim`.
        means: Vec<f64>,
        /// `n_components` stacked `dim x dim` matrices.
        covariances: Vec<f64>,
    },
    Subspace {
        dim: usize,
        latent_dim: usize,
        origin: Vec<f64>,
        /// `dim x latent_dim`, orthonormal columns.
        basis: Vec<f64>,
        /// `latent_dim x latent_dim`; absent or null for the flat limit.
        #[serde(default)]
        latent_covariance: Option<Vec<f64>>,
    },
}

fn expect_len(name: &str, data: &[f64], len: usize) -> Result<()> {
    if data.len() == len {
        Ok(())
    } else {
        Err(Error::Format(format!(
            "`{name}` has {} entries, expected {len}",
            data.len()
        )))
    }
}

impl PriorFile {
    pub fn build(&self) -> Result<BuiltinPrior> {
        match self {
            Self::Gmm {
                dim,
                weights,
                means,
                covariances,
            } => {
                let j = weights.len();
                expect_len("means", means, j * dim)?;
                expect_len("covariances", covariances, j * dim * dim)?;
                let means = means
                    .chunks_exact((*dim).max(1))
                    .map(DVector::from_column_slice)
                    .collect();
                let covs = covariances
                    .chunks_exact((dim * dim).max(1))
                    .map(|c| DMatrix::from_row_slice(*dim, *dim, c))
                    .collect();
                Ok(BuiltinPrior::Gmm(GaussianMixturePrior::new(weights.clone(), means, covs)?))
            }
            Self::Subspace {
                dim,
                latent_dim,
                origin,
                basis,
                latent_covariance,
            } => {
                expect_len("origin", origin, *dim)?;
                expect_len("basis", basis, dim * latent_dim)?;
                let cov = match latent_covariance {
                    Some(c) => {
                        expect_len("latent_covariance", c, latent_dim * latent_dim)?;
                        Some(DMatrix::from_row_slice(*latent_dim, *latent_dim, c))
                    }
                    None => None,
                };
                Ok(BuiltinPrior::Subspace(AffineSubspacePrior::new(
                    DVector::from_column_slice(origin),
                    DMatrix::from_row_slice(*dim, *latent_dim, basis),
                    cov,
                )?))
            }
        }
    }

    pub fn from_json(text: &str) -> Result<BuiltinPrior> {
        let file: PriorFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        file.build()
    }
}

impl From<&GaussianMixturePrior> for PriorFile {
    fn from(p: &GaussianMixturePrior) -> Self {
        Self::Gmm {
            dim: p.dim,
            weights: p.components.iter().map(|c| c.weight).collect(),
            means: p.components.iter().flat_map(|c| c.mean.iter().copied()).collect(),
            covariances: p
                .components
                .iter()
                .flat_map(|c| c.covariance.transpose().as_slice().to_vec())
                .collect(),
        }
    }
}

impl From<&AffineSubspacePrior> for PriorFile {
    fn from(p: &AffineSubspacePrior) -> Self {
        Self::Subspace {
            dim: p.dim(),
            latent_dim: p.latent_dim(),
            origin: p.origin.as_slice().to_vec(),
            basis: p.basis.transpose().as_slice().to_vec(),
            latent_covariance: p
                .latent_covariance
                .as_ref()
                .map(|c| c.transpose().as_slice().to_vec()),
        }
    }
}
