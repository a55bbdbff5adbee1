use nalgebra::DVector;
use rand::Rng;

use crate::error::{check_finite, Error, Result};
use crate::rng::standard_normal;

/// Discrete variance-preserving diffusion timeline.
///
/// `alpha_bar[t]` is the cumulative product of `1 - beta[s]` for `s <= t`;
/// `sigma[t] = sqrt((1 - alpha_bar[t]) / alpha_bar[t])` is the matching noise
/// level for the rescaled variable `x_t / sqrt(alpha_bar[t])`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    tilde_beta: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_STEPS: usize = 1000;
    pub const DEFAULT_BETA_MIN: f64 = 1e-4;
    pub const DEFAULT_BETA_MAX: f64 = 0.02;

    /// Linear beta schedule.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidParameter(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let span = beta_max - beta_min;
        let beta = (0..steps)
            .map(|t| beta_min + span * t as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::InvalidParameter("schedule needs at least 2 steps".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidParameter(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        check_finite("alpha_bar", &alpha_bar)?;
        if alpha_bar.iter().any(|&a| a <= 0.0) {
            return Err(Error::Numerical("alpha_bar underflowed to zero".into()));
        }
        let sigma = alpha_bar.iter().map(|a| ((1.0 - a) / a).sqrt()).collect();
        let tilde_beta = (0..beta.len())
            .map(|t| {
                let prev = if t == 0 { 1.0 } else { alpha_bar[t - 1] };
                posterior_std(alpha_bar[t], prev)
            })
            .collect();
        Ok(Self {
            beta,
            alpha_bar,
            sigma,
            tilde_beta,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `alpha_bar` of the step before `t`, or 1 (clean data) when `prev` is
    /// `None`.
    pub fn alpha_bar_or_clean(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bar[t])
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Full-grid DDPM posterior std between `t - 1` and `t`.
    pub fn tilde_beta(&self, t: usize) -> f64 {
        self.tilde_beta[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "timestep {t} outside [0, {})",
                self.steps()
            )))
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(
            Self::DEFAULT_STEPS,
            Self::DEFAULT_BETA_MIN,
            Self::DEFAULT_BETA_MAX,
        )
        .expect("default schedule is valid")
    }
}

/// DDPM posterior std for a jump from `alpha_bar_prev` to `alpha_bar_t`:
/// `sqrt((1 - a_prev) / (1 - a_t)) * sqrt(1 - a_t / a_prev)`.
pub fn posterior_std(alpha_bar_t: f64, alpha_bar_prev: f64) -> f64 {
    let ratio = ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)).max(0.0);
    let jump = (1.0 - alpha_bar_t / alpha_bar_prev).max(0.0);
    (ratio * jump).sqrt()
}

/// Sample `x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps`, `eps ~ N(0, I)`.
pub fn forward_diffuse<R: Rng + ?Sized>(
    x0: &DVector<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<DVector<f64>> {
    schedule.check_timestep(t)?;
    let a = schedule.alpha_bar(t);
    let eps = standard_normal(rng, x0.len());
    Ok(x0 * a.sqrt() + eps * (1.0 - a).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, SeedStream};

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        for t in 1..s.steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(999) < 0.01);
        assert!((s.alpha_bar(0) - (1.0 - s.beta(0))).abs() < 1e-6);
        // Direct product, computed independently.
        let direct: f64 = (0..1000)
            .map(|t| 1.0 - (1e-4 + (0.02 - 1e-4) * t as f64 / 999.0))
            .product();
        assert!((s.alpha_bar(999) - direct).abs() < 1e-15);
    }

    #[test]
    fn constant_beta_closed_form() {
        let s = NoiseSchedule::linear(50, 0.01, 0.01).unwrap();
        for t in 0..50 {
            let expected = 0.99f64.powi(t as i32 + 1);
            assert!((s.alpha_bar(t) - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn invalid_ranges() {
        assert!(NoiseSchedule::linear(10, 0.02, 0.01).is_err());
        assert!(NoiseSchedule::linear(1, 0.01, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.01, 1.0).is_err());
    }

    #[test]
    fn sigma_and_posterior_std() {
        let s = NoiseSchedule::default();
        let a = s.alpha_bar(400);
        assert!((s.sigma(400) - ((1.0 - a) / a).sqrt()).abs() < 1e-15);
        assert_eq!(s.tilde_beta(0), 0.0);
        // Full-grid posterior std equals sqrt(beta_t * (1-a_{t-1})/(1-a_t)).
        let t = 500;
        let expected =
            (s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t))).sqrt();
        assert!((s.tilde_beta(t) - expected).abs() < 1e-12);
        assert_eq!(posterior_std(0.3, 1.0), 0.0);
    }

    #[test]
    fn forward_diffuse_is_seeded() {
        let s = NoiseSchedule::default();
        let x0 = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let seeds = SeedStream::new(7);
        let a = forward_diffuse(&x0, 300, &s, &mut seeds.rng(Purpose::ForwardDiffuse, 0, 0)).unwrap();
        let b = forward_diffuse(&x0, 300, &s, &mut seeds.rng(Purpose::ForwardDiffuse, 0, 0)).unwrap();
        assert_eq!(a, b);
        assert!(forward_diffuse(&x0, 1000, &s, &mut seeds.rng(Purpose::ForwardDiffuse, 0, 0)).is_err());
    }

    #[test]
    fn forward_diffuse_mean() {
        let s = NoiseSchedule::default();
        let x0 = DVector::from_column_slice(&[1.0, -2.0]);
        let t = 250;
        let n = 10_000;
        let mut rng = SeedStream::new(11).rng(Purpose::ForwardDiffuse, 0, 0);
        let mut mean = DVector::zeros(2);
        for _ in 0..n {
            mean += forward_diffuse(&x0, t, &s, &mut rng).unwrap();
        }
        mean /= n as f64;
        let a = s.alpha_bar(t);
        let tol = 3.0 * ((1.0 - a) / n as f64).sqrt();
        for i in 0..2 {
            assert!((mean[i] - a.sqrt() * x0[i]).abs() <= tol, "coord {i}");
        }
    }

    #[test]
    fn forward_diffuse_no_noise_limit() {
        let s = NoiseSchedule::linear(10, 1e-10, 1e-3).unwrap();
        let x0 = DVector::from_column_slice(&[0.25, 4.0]);
        let xt = forward_diffuse(&x0, 0, &s, &mut SeedStream::new(3).rng(Purpose::ForwardDiffuse, 0, 0)).unwrap();
        let bound = (1.0 - s.alpha_bar(0)).sqrt() * 5.0;
        assert!((xt - x0).amax() <= bound);
    }
}
