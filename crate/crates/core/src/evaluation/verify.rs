//! Numerical checks of the ensemble gradient's structural properties.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::enkf::{cov_action_span_check, freemcg_gradient, thm2_residual, ParticleEnsemble};
use crate::error::{check_dim, Error, Result};
use crate::linalg::line_angle_deg;
use crate::models::{oracle_log_prob_gradient, ClassIndex, OracleClassifier, ProbVector, QuadraticField, ScalarToyWrapper};
use crate::rng::{standard_normal, Purpose, SeedStream};

pub const DEFAULT_DELTAS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

/// Below this the residuals are treated as exactly zero (e.g. affine models)
/// and no slope is fitted.
pub const RESIDUAL_FLOOR: f64 = 1e-10;

/// A skewed unit-radius particle shape in `dim` dimensions: the vertices of
/// the standard simplex, centered and scaled so the farthest point sits at
/// distance one. Its nonzero third moments make the cubic error term visible.
pub fn simplex_shape(dim: usize) -> Vec<DVector<f64>> {
    let mut pts = vec![DVector::zeros(dim)];
    for i in 0..dim {
        let mut e = DVector::zeros(dim);
        e[i] = 1.0;
        pts.push(e);
    }
    let mean = pts.iter().fold(DVector::zeros(dim), |acc, p| acc + p) / pts.len() as f64;
    let centered: Vec<_> = pts.iter().map(|p| p - &mean).collect();
    let radius = centered.iter().map(|p| p.norm()).fold(0.0, f64::max);
    centered.into_iter().map(|p| p / radius).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderScanReport {
    pub deltas: Vec<f64>,
    /// `|| C_xf - C_xx J^T ||_F` at each radius.
    pub residuals: Vec<f64>,
    /// Least-squares slope of log residual against log delta; NaN (null in
    /// JSON) when undefined.
    pub fitted_slope: f64,
    pub slope_defined: bool,
}

fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Places `center + delta * s_k` for each shape point and measures how far
/// the cross-covariance is from its linearization as `delta` shrinks.
pub fn order_scan(
    model: &dyn OracleClassifier,
    center: &DVector<f64>,
    shape: &[DVector<f64>],
    deltas: &[f64],
) -> Result<OrderScanReport> {
    check_dim("order scan center", model.dim_in(), center.len())?;
    if shape.len() < 2 {
        return Err(Error::InvalidInput("order scan needs at least two particles".into()));
    }
    if deltas.len() < 2
        || deltas.iter().any(|d| !(d.is_finite() && *d > 0.0))
        || deltas.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::InvalidParameter(
            "order scan needs at least two positive, strictly decreasing radii".into(),
        ));
    }
    let mut residuals = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let particles: Vec<_> = shape.iter().map(|s| center + s * delta).collect();
        let e = ParticleEnsemble::evaluate(model, particles)?;
        residuals.push(thm2_residual(model, &e)?);
    }
    let slope_defined = residuals.iter().any(|&r| r > RESIDUAL_FLOOR) && residuals.iter().all(|&r| r > 0.0);
    let fitted_slope = if slope_defined {
        log_log_slope(deltas, &residuals)
    } else {
        f64::NAN
    };
    Ok(OrderScanReport {
        deltas: deltas.to_vec(),
        residuals,
        fitted_slope,
        slope_defined,
    })
}

/// Order scan of the 2-D toy field `-x + y^2` around `(0.5, 1.0)`.
pub fn toy_order_scan() -> Result<OrderScanReport> {
    let model = ScalarToyWrapper::new(QuadraticField::toy());
    order_scan(&model, &DVector::from_column_slice(&[0.5, 1.0]), &simplex_shape(2), &DEFAULT_DELTAS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPoint {
    pub location: Vec<f64>,
    pub tangent: Vec<f64>,
    pub raw_gradient: Vec<f64>,
    pub ensemble_gradient: Vec<f64>,
    /// Line angles to the tangent, in degrees.
    pub raw_angle_deg: f64,
    pub ensemble_angle_deg: f64,
    /// Norm of the ensemble gradient's component normal to the tangent,
    /// relative to its full norm.
    pub off_tangent_ratio: f64,
}

/// Compare the analytic gradient of `log p(0 | x)` at `location` with the
/// ensemble estimate from `particles` lying on a curve through it.
pub fn manifold_alignment(
    model: &dyn OracleClassifier,
    location: &DVector<f64>,
    tangent: &DVector<f64>,
    particles: Vec<DVector<f64>>,
) -> Result<AlignmentPoint> {
    check_dim("alignment tangent", location.len(), tangent.len())?;
    let c = ClassIndex::checked(0, model.dim_out())?;
    let e = ParticleEnsemble::evaluate(model, particles)?;
    let p = ProbVector::mean(&e.probabilities())?;
    let g = freemcg_gradient(&e, c, &p)?;
    let p_here = model.eval(location)?.softmax();
    let raw = oracle_log_prob_gradient(&model.jacobian(location)?, &p_here, c)?;
    let unit = tangent.normalize();
    let normal = &g - &unit * unit.dot(&g);
    let off_tangent_ratio = if g.norm() == 0.0 { 0.0 } else { normal.norm() / g.norm() };
    Ok(AlignmentPoint {
        location: location.as_slice().to_vec(),
        tangent: unit.as_slice().to_vec(),
        raw_angle_deg: line_angle_deg(&raw, tangent),
        ensemble_angle_deg: line_angle_deg(&g, tangent),
        raw_gradient: raw.as_slice().to_vec(),
        ensemble_gradient: g.as_slice().to_vec(),
        off_tangent_ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveToyConfig {
    /// Curve `y = offset + curvature * x^2`.
    pub offset: f64,
    pub curvature: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub points: usize,
    /// Particles per point, spread over parameter offsets in `[-radius, radius]`.
    pub particles: usize,
    pub radius: f64,
}

impl Default for CurveToyConfig {
    fn default() -> Self {
        Self {
            offset: 1.0,
            curvature: 0.5,
            x_min: -1.5,
            x_max: -0.2,
            points: 10,
            particles: 9,
            radius: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveToyReport {
    pub config: CurveToyConfig,
    pub points: Vec<AlignmentPoint>,
    pub max_off_tangent_ratio: f64,
    /// Whether the ensemble gradient is closer to the tangent than the raw
    /// gradient at every point.
    pub ensemble_always_closer: bool,
}

/// The toy field `-x + y^2` restricted to a parabola, with particles drawn
/// on the parabola near each evaluation point.
pub fn curve_toy(cfg: &CurveToyConfig) -> Result<CurveToyReport> {
    if cfg.points == 0 || cfg.particles < 2 || cfg.radius.is_nan() || cfg.radius <= 0.0 || cfg.x_max.is_nan() || cfg.x_max < cfg.x_min {
        return Err(Error::InvalidParameter("degenerate curve toy configuration".into()));
    }
    let model = ScalarToyWrapper::new(QuadraticField::toy());
    let curve = |x: f64| DVector::from_column_slice(&[x, cfg.offset + cfg.curvature * x * x]);
    let mut points = Vec::with_capacity(cfg.points);
    for i in 0..cfg.points {
        let x0 = if cfg.points == 1 {
            cfg.x_min
        } else {
            cfg.x_min + (cfg.x_max - cfg.x_min) * i as f64 / (cfg.points - 1) as f64
        };
        let half = (cfg.particles - 1) as f64 / 2.0;
        let particles = (0..cfg.particles)
            .map(|k| curve(x0 + cfg.radius * (k as f64 - half) / half))
            .collect();
        let tangent = DVector::from_column_slice(&[1.0, 2.0 * cfg.curvature * x0]);
        points.push(manifold_alignment(&model, &curve(x0), &tangent, particles)?);
    }
    let max_off_tangent_ratio = points.iter().map(|p| p.off_tangent_ratio).fold(0.0, f64::max);
    let ensemble_always_closer = points.iter().all(|p| p.ensemble_angle_deg < p.raw_angle_deg);
    Ok(CurveToyReport {
        config: *cfg,
        points,
        max_off_tangent_ratio,
        ensemble_always_closer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanReport {
    pub trials: usize,
    pub dim: usize,
    pub particles: usize,
    pub max_relative_residual: f64,
}

/// Random ensembles with fewer particles than dimensions: `C_xx b` must lie
/// in the span of the deviations.
pub fn span_trials(seed: u64, trials: usize, dim: usize, particles: usize) -> Result<SpanReport> {
    if trials == 0 || particles < 2 {
        return Err(Error::InvalidParameter("span check needs trials and >= 2 particles".into()));
    }
    let seeds = SeedStream::new(seed);
    let model = crate::models::LinearSoftmax::constant(2, dim);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let mut rng = seeds.rng(Purpose::Custom(1), t as u64, 0);
        let xs = (0..particles).map(|_| standard_normal(&mut rng, dim)).collect();
        let b = standard_normal(&mut rng, dim);
        let e = ParticleEnsemble::evaluate(&model, xs)?;
        worst = worst.max(cov_action_span_check(&e, &b)?);
    }
    Ok(SpanReport {
        trials,
        dim,
        particles,
        max_relative_residual: worst,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub span_check: SpanReport,
    pub order_scan: OrderScanReport,
    pub curve_toy: CurveToyReport,
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn run_verification(seed: u64) -> Result<VerificationReport> {
    let span = span_trials(seed, 200, 20, 8)?;
    let order_scan = toy_order_scan()?;
    let curve_toy = curve_toy(&CurveToyConfig::default())?;
    let checks = vec![
        Check {
            name: "span_relative_residual_max".into(),
            value: span.max_relative_residual,
            threshold: 1e-10,
            passed: span.max_relative_residual <= 1e-10,
        },
        Check {
            name: "order_scan_slope_min".into(),
            value: order_scan.fitted_slope,
            threshold: 2.5,
            passed: order_scan.slope_defined && order_scan.fitted_slope >= 2.5,
        },
        Check {
            name: "curve_off_tangent_ratio_max".into(),
            value: curve_toy.max_off_tangent_ratio,
            threshold: 0.05,
            passed: curve_toy.max_off_tangent_ratio <= 0.05 && curve_toy.ensemble_always_closer,
        },
    ];
    Ok(VerificationReport {
        seed,
        span_check: span,
        order_scan,
        curve_toy,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearSoftmax;
    use nalgebra::DMatrix;

    #[test]
    fn simplex_is_centered_unit_radius() {
        let s = simplex_shape(3);
        assert_eq!(s.len(), 4);
        let sum = s.iter().fold(DVector::zeros(3), |a, p| a + p);
        assert!(sum.amax() < 1e-15);
        assert!((s.iter().map(|p| p.norm()).fold(0.0, f64::max) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn toy_scan_is_cubic() {
        let r = toy_order_scan().unwrap();
        assert!(r.slope_defined);
        assert!((r.fitted_slope - 3.0).abs() < 1e-6, "{}", r.fitted_slope);
        let n = r.residuals.len();
        assert!(r.residuals[n - 2] / r.residuals[n - 1] >= 6.0);
    }

    #[test]
    fn affine_model_has_no_slope() {
        let model = LinearSoftmax::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]), DVector::zeros(2)).unwrap();
        let r = order_scan(&model, &DVector::from_column_slice(&[0.1, 0.2]), &simplex_shape(2), &DEFAULT_DELTAS).unwrap();
        assert!(!r.slope_defined);
        assert!(r.fitted_slope.is_nan());
        assert!(r.residuals.iter().all(|&v| v <= RESIDUAL_FLOOR));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"fitted_slope\":null"));
    }

    #[test]
    fn scan_rejects_bad_radii() {
        let model = ScalarToyWrapper::new(QuadraticField::toy());
        let c = DVector::zeros(2);
        assert!(order_scan(&model, &c, &simplex_shape(2), &[0.1, 0.2]).is_err());
        assert!(order_scan(&model, &c, &simplex_shape(2), &[0.1]).is_err());
    }

    #[test]
    fn horizontal_line_gradient_is_tangent() {
        let model = ScalarToyWrapper::new(QuadraticField::toy());
        let particles = (0..7).map(|k| DVector::from_column_slice(&[0.3 + 0.01 * k as f64, 1.7])).collect();
        let a = manifold_alignment(
            &model,
            &DVector::from_column_slice(&[0.33, 1.7]),
            &DVector::from_column_slice(&[1.0, 0.0]),
            particles,
        )
        .unwrap();
        assert!(a.off_tangent_ratio <= 1e-10);
        assert!(a.raw_angle_deg > 60.0);
    }

    #[test]
    fn full_report_passes() {
        let r = run_verification(7).unwrap();
        assert!(r.passed(), "{:?}", r.checks);
    }
}
