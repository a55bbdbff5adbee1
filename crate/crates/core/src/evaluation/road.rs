//! Removal-based attribution scoring with noisy linear imputation.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionMap, SpatialLayout};
use crate::error::{check_dim, Error, Result};
use crate::models::Classifier;
use crate::rng::{Purpose, SeedStream};

pub const DEFAULT_NOISE_STD: f64 = 0.05;

pub fn default_fractions() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

/// Fill removed pixels so that each equals the mean of its in-bounds
/// 4-neighbors, with kept pixels as boundary data. Channels are filled
/// independently. A fully removed image becomes its per-channel mean.
pub fn harmonic_fill(x: &DVector<f64>, layout: SpatialLayout, removed: &[bool]) -> Result<DVector<f64>> {
    check_dim("imputation input", layout.len(), x.len())?;
    check_dim("imputation mask", layout.pixels(), removed.len())?;
    let pixels = layout.pixels();
    let mut out = x.clone();
    let unknown: Vec<usize> = (0..pixels).filter(|&p| removed[p]).collect();
    if unknown.is_empty() {
        return Ok(out);
    }
    if unknown.len() == pixels {
        for c in 0..layout.channels {
            let block = &x.as_slice()[c * pixels..(c + 1) * pixels];
            let mean = block.iter().sum::<f64>() / pixels as f64;
            out.as_mut_slice()[c * pixels..(c + 1) * pixels].fill(mean);
        }
        return Ok(out);
    }

    let mut slot = vec![usize::MAX; pixels];
    for (i, &p) in unknown.iter().enumerate() {
        slot[p] = i;
    }
    let grid = Grid::new(layout.height, layout.width);
    let system = LaplaceSystem {
        neighbors: unknown
            .iter()
            .map(|&p| grid.neighbors(p).collect())
            .collect(),
        slot,
    };
    for c in 0..layout.channels {
        let block = &x.as_slice()[c * pixels..(c + 1) * pixels];
        let rhs: Vec<f64> = system
            .neighbors
            .iter()
            .map(|ns| ns.iter().filter(|&&q| !removed[q]).map(|&q| block[q]).sum())
            .collect();
        let solution = system.solve(&rhs);
        for (i, &p) in unknown.iter().enumerate() {
            out[c * pixels + p] = solution[i];
        }
    }
    Ok(out)
}

/// [`harmonic_fill`] followed by `N(0, noise_std^2)` noise on every filled
/// entry.
pub fn noisy_linear_impute<R: Rng + ?Sized>(
    x: &DVector<f64>,
    layout: SpatialLayout,
    removed: &[bool],
    noise_std: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise std must be >= 0, got {noise_std}"
        )));
    }
    let mut out = harmonic_fill(x, layout, removed)?;
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("checked std");
        let pixels = layout.pixels();
        for c in 0..layout.channels {
            for p in (0..pixels).filter(|&p| removed[p]) {
                out[c * pixels + p] += normal.sample(rng);
            }
        }
    }
    Ok(out)
}

struct Grid {
    height: usize,
    width: usize,
}

impl Grid {
    fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    fn neighbors(&self, p: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = (p / self.width, p % self.width);
        let up = (r > 0).then(|| p - self.width);
        let down = (r + 1 < self.height).then(|| p + self.width);
        let left = (c > 0).then(|| p - 1);
        let right = (c + 1 < self.width).then(|| p + 1);
        [up, down, left, right].into_iter().flatten()
    }
}

/// `deg_i u_i - sum_{unknown j ~ i} u_j = rhs_i`, symmetric positive
/// definite whenever at least one pixel is known.
struct LaplaceSystem {
    neighbors: Vec<Vec<usize>>,
    slot: Vec<usize>,
}

impl LaplaceSystem {
    fn apply(&self, u: &[f64], out: &mut [f64]) {
        for (i, ns) in self.neighbors.iter().enumerate() {
            let mut acc = ns.len() as f64 * u[i];
            for &q in ns {
                let j = self.slot[q];
                if j != usize::MAX {
                    acc -= u[j];
                }
            }
            out[i] = acc;
        }
    }

    /// Conjugate gradients.
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut u = vec![0.0; n];
        let mut r = rhs.to_vec();
        let mut d = r.clone();
        let mut ad = vec![0.0; n];
        let mut rr = dot(&r, &r);
        let stop = 1e-28 * dot(rhs, rhs).max(1.0);
        for _ in 0..(4 * n + 50) {
            if rr <= stop {
                break;
            }
            self.apply(&d, &mut ad);
            let step = rr / dot(&d, &ad);
            for i in 0..n {
                u[i] += step * d[i];
                r[i] -= step * ad[i];
            }
            let rr_next = dot(&r, &r);
            let ratio = rr_next / rr;
            for i in 0..n {
                d[i] = r[i] + ratio * d[i];
            }
            rr = rr_next;
        }
        u
    }
}

/// Model score as the most important pixels are progressively removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadCurve {
    pub fractions: Vec<f64>,
    /// Probability of the originally predicted class.
    pub scores: Vec<f64>,
    /// Trapezoid area under `scores`; lower means a better attribution.
    pub auc: f64,
}

impl RoadCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,score\n");
        for (f, s) in self.fractions.iter().zip(&self.scores) {
            out.push_str(&format!("{f},{s}\n"));
        }
        out
    }
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Pixel indices by decreasing importance; ties by index.
pub fn removal_order(map: &AttributionMap) -> Vec<usize> {
    let mut order: Vec<usize> = (0..map.values.len()).collect();
    order.sort_by(|&a, &b| {
        map.values[b]
            .partial_cmp(&map.values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

pub fn road_curve(
    model: &dyn Classifier,
    x: &DVector<f64>,
    layout: SpatialLayout,
    map: &AttributionMap,
    fractions: &[f64],
    noise_std: f64,
    seed: u64,
) -> Result<RoadCurve> {
    check_dim("road input", model.dim_in(), x.len())?;
    check_dim("road layout", layout.len(), x.len())?;
    check_dim("attribution map height", layout.height, map.height)?;
    check_dim("attribution map width", layout.width, map.width)?;
    check_dim("attribution map", layout.pixels(), map.values.len())?;
    if fractions.is_empty() {
        return Err(Error::InvalidParameter("no removal fractions given".into()));
    }
    if fractions.iter().any(|f| !(0.0..1.0).contains(f))
        || fractions.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::InvalidParameter(
            "removal fractions must be strictly increasing in [0, 1)".into(),
        ));
    }

    let original = model.eval(x)?.softmax();
    let c = original.argmax();
    let order = removal_order(map);
    let seeds = SeedStream::new(seed);
    let pixels = layout.pixels();
    let mut scores = Vec::with_capacity(fractions.len());
    for (i, &f) in fractions.iter().enumerate() {
        let count = ((f * pixels as f64).round() as usize).min(pixels);
        if count == 0 {
            scores.push(original.get(c));
            continue;
        }
        let mut removed = vec![false; pixels];
        for &p in &order[..count] {
            removed[p] = true;
        }
        let mut rng = seeds.rng(Purpose::Imputation, i as u64, 0);
        let imputed = noisy_linear_impute(x, layout, &removed, noise_std, &mut rng)?;
        scores.push(model.eval(&imputed)?.softmax().get(c));
    }
    let auc = trapezoid(fractions, &scores);
    Ok(RoadCurve {
        fractions: fractions.to_vec(),
        scores,
        auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::postprocess;
    use crate::models::LinearSoftmax;
    use nalgebra::DMatrix;

    fn mask(pixels: usize, removed: &[usize]) -> Vec<bool> {
        let mut m = vec![false; pixels];
        for &p in removed {
            m[p] = true;
        }
        m
    }

    #[test]
    fn constant_image_stays_constant() {
        let layout = SpatialLayout::new(2, 5, 6);
        let x = DVector::from_element(layout.len(), 0.4);
        let m = mask(30, &[0, 1, 7, 8, 14, 29]);
        let mut rng = SeedStream::new(1).rng(Purpose::Imputation, 0, 0);
        let out = noisy_linear_impute(&x, layout, &m, 0.05, &mut rng).unwrap();
        assert!((out - &x).amax() <= 5.0 * 0.05);
        let clean = harmonic_fill(&x, layout, &m).unwrap();
        assert!((clean - x).amax() <= 1e-12);
    }

    #[test]
    fn empty_mask_is_identity() {
        let layout = SpatialLayout::grayscale(3, 3);
        let x = DVector::from_fn(9, |i, _| i as f64);
        let mut rng = SeedStream::new(1).rng(Purpose::Imputation, 0, 0);
        assert_eq!(noisy_linear_impute(&x, layout, &[false; 9], 0.05, &mut rng).unwrap(), x);
    }

    #[test]
    fn single_interior_pixel_is_neighbor_mean() {
        let layout = SpatialLayout::grayscale(3, 3);
        let x = DVector::from_column_slice(&[0.0, 1.0, 0.0, 2.0, 99.0, 4.0, 0.0, 8.0, 0.0]);
        let mut rng = SeedStream::new(1).rng(Purpose::Imputation, 0, 0);
        let out = noisy_linear_impute(&x, layout, &mask(9, &[4]), 0.0, &mut rng).unwrap();
        assert!((out[4] - 3.75).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_uses_global_mean() {
        let layout = SpatialLayout::grayscale(2, 2);
        let x = DVector::from_column_slice(&[1.0, 2.0, 3.0, 6.0]);
        let out = harmonic_fill(&x, layout, &[true; 4]).unwrap();
        assert!(out.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn imputed_pixels_satisfy_mean_equations() {
        let layout = SpatialLayout::grayscale(8, 8);
        let x = DVector::from_fn(64, |i, _| ((i * 37) % 11) as f64 / 11.0);
        let removed: Vec<usize> = (0..64).filter(|i| (i * 7) % 5 < 3).collect();
        let m = mask(64, &removed);
        let out = harmonic_fill(&x, layout, &m).unwrap();
        let grid = Grid::new(8, 8);
        for &p in &removed {
            let ns: Vec<usize> = grid.neighbors(p).collect();
            let mean = ns.iter().map(|&q| out[q]).sum::<f64>() / ns.len() as f64;
            assert!((out[p] - mean).abs() <= 1e-8);
        }
    }

    #[test]
    fn curve_basics() {
        let layout = SpatialLayout::grayscale(4, 4);
        let x = DVector::from_fn(16, |i, _| i as f64 / 16.0);
        let flat = LinearSoftmax::constant(3, 16);
        let map = postprocess(&DVector::from_fn(16, |i, _| i as f64), layout).unwrap();
        let fractions = default_fractions();
        let curve = road_curve(&flat, &x, layout, &map, &fractions, 0.05, 0).unwrap();
        assert!(curve.scores.iter().all(|&s| (s - 1.0 / 3.0).abs() < 1e-15));
        assert!((curve.auc - 0.9 / 3.0).abs() < 1e-12);

        let w = DMatrix::from_fn(2, 16, |c, j| if c == 0 { j as f64 / 4.0 } else { 0.0 });
        let model = LinearSoftmax::new(w, DVector::zeros(2)).unwrap();
        let curve = road_curve(&model, &x, layout, &map, &fractions, 0.05, 0).unwrap();
        let p0 = model.eval(&x).unwrap().softmax();
        assert_eq!(curve.scores[0], p0.get(p0.argmax()));
        assert!(road_curve(&model, &x, layout, &map, &[0.5, 0.2], 0.05, 0).is_err());
        assert!(road_curve(&model, &x, SpatialLayout::grayscale(2, 8), &map, &fractions, 0.05, 0).is_err());
        assert!(curve.to_csv().starts_with("fraction,score\n0,"));
    }

    #[test]
    fn ties_break_by_index() {
        let map = postprocess(&DVector::from_column_slice(&[1.0, 2.0, 2.0, 0.5]), SpatialLayout::flat(4)).unwrap();
        assert_eq!(removal_order(&map), vec![1, 2, 0, 3]);
    }

    #[test]
    fn auc_depends_only_on_ranking() {
        let layout = SpatialLayout::grayscale(4, 4);
        let x = DVector::from_fn(16, |i, _| ((i * 5) % 7) as f64 / 7.0);
        let w = DMatrix::from_fn(2, 16, |c, j| if c == 0 { (j % 5) as f64 - 2.0 } else { 0.1 });
        let model = LinearSoftmax::new(w, DVector::zeros(2)).unwrap();
        let raw = DVector::from_fn(16, |i, _| ((i * 3) % 16) as f64 + 0.5);
        let a = postprocess(&raw, layout).unwrap();
        let b = postprocess(&raw.map(|v| v.powi(3) * 2.0 + 1.0), layout).unwrap();
        let ca = road_curve(&model, &x, layout, &a, &default_fractions(), 0.05, 9).unwrap();
        let cb = road_curve(&model, &x, layout, &b, &default_fractions(), 0.05, 9).unwrap();
        assert_eq!(ca.auc, cb.auc);
    }
}
