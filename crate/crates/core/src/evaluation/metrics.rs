use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::counterfactual::CounterfactualResult;
use crate::diffusion::AffineSubspacePrior;
use crate::error::{check_dim, Error, Result};

fn non_empty(results: &[CounterfactualResult]) -> Result<()> {
    if results.is_empty() {
        return Err(Error::InvalidInput("no counterfactual results".into()));
    }
    Ok(())
}

/// Fraction of counterfactuals classified as their target.
pub fn flip_rate(results: &[CounterfactualResult]) -> Result<f64> {
    non_empty(results)?;
    Ok(results.iter().filter(|r| r.flipped).count() as f64 / results.len() as f64)
}

pub fn mean_l2(results: &[CounterfactualResult]) -> Result<f64> {
    non_empty(results)?;
    Ok(results.iter().map(|r| r.l2).sum::<f64>() / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TangentReport {
    /// `||P_perp g|| / ||g||`.
    pub off_manifold_ratio: f64,
    /// Angle between `g` and its tangent projection.
    pub angle_deg: f64,
}

/// How far a direction leaves a linear data manifold. A zero vector reports
/// zero on both counts.
pub fn tangent_report(g: &DVector<f64>, prior: &AffineSubspacePrior) -> Result<TangentReport> {
    check_dim("tangent report direction", prior.dim(), g.len())?;
    let norm = g.norm();
    if norm == 0.0 {
        return Ok(TangentReport {
            off_manifold_ratio: 0.0,
            angle_deg: 0.0,
        });
    }
    let normal = prior.normal_component(g);
    let tangent = g - &normal;
    Ok(TangentReport {
        off_manifold_ratio: normal.norm() / norm,
        angle_deg: normal.norm().atan2(tangent.norm()).to_degrees(),
    })
}
