//! Small dense helpers shared by the verification routines.

use nalgebra::DVector;

/// Orthonormal basis of `span(vectors)` by modified Gram-Schmidt with one
/// re-orthogonalization pass. A vector is dropped when its residual norm
/// falls to `rel_tol` times the largest input norm or below.
pub fn orthonormal_basis(vectors: &[DVector<f64>], rel_tol: f64) -> Vec<DVector<f64>> {
    let scale = vectors.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Vec::new();
    }
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for v in vectors {
        let mut r = v.clone();
        for _pass in 0..2 {
            for q in &basis {
                let coeff = q.dot(&r);
                r.axpy(-coeff, q, 1.0);
            }
        }
        let norm = r.norm();
        if norm > rel_tol * scale {
            basis.push(r / norm);
        }
    }
    basis
}

/// Component of `v` orthogonal to the span of the orthonormal `basis`.
pub fn orthogonal_residual(v: &DVector<f64>, basis: &[DVector<f64>]) -> DVector<f64> {
    let mut r = v.clone();
    for _pass in 0..2 {
        for q in basis {
            let coeff = q.dot(&r);
            r.axpy(-coeff, q, 1.0);
        }
    }
    r
}

/// Angle in degrees between two nonzero vectors.
pub fn angle_deg(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return 0.0;
    }
    (a.dot(b) / denom).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angle in degrees between the lines spanned by two vectors, in [0, 90].
pub fn line_angle_deg(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return 0.0;
    }
    (a.dot(b).abs() / denom).clamp(0.0, 1.0).acos().to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn drops_dependent_vectors() {
        let vs = [v(&[1.0, 1.0, 0.0]), v(&[2.0, 2.0, 0.0]), v(&[0.0, 1.0, 1.0])];
        let q = orthonormal_basis(&vs, 1e-12);
        assert_eq!(q.len(), 2);
        for (i, a) in q.iter().enumerate() {
            for (j, b) in q.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((a.dot(b) - expected).abs() < 1e-14);
            }
        }
        assert!(orthonormal_basis(&[DVector::zeros(3)], 1e-12).is_empty());
    }

    #[test]
    fn residual_and_angles() {
        let q = [v(&[1.0, 0.0, 0.0])];
        assert_eq!(orthogonal_residual(&v(&[3.0, 4.0, 0.0]), &q), v(&[0.0, 4.0, 0.0]));
        assert!((angle_deg(&v(&[1.0, 0.0]), &v(&[0.0, 2.0])) - 90.0).abs() < 1e-12);
        assert!((angle_deg(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0])) - 180.0).abs() < 1e-12);
        assert!(line_angle_deg(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0])).abs() < 1e-6);
    }
}
