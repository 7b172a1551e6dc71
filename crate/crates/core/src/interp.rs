//! k-nearest-neighbour, inverse-distance-squared interpolation of ODE
//! coefficient matrices over the parameter space.
//!
//! Distances are Euclidean after dividing each axis by its scale (by default
//! the parameter-space range), which is a Mahalanobis distance with a
//! diagonal covariance. The weights form a partition of unity, so the result
//! is a convex combination of the neighbours' matrices.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Scaled distances below this snap to the coincident training point.
pub const SNAP_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMetric {
    pub scales: Vec<f64>,
}

impl ParamMetric {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!(
                "metric scales must be positive, got {scales:?}"
            )));
        }
        Ok(Self { scales })
    }

    /// Scales each axis by the width of `bounds`.
    pub fn from_bounds(bounds: &[[f64; 2]]) -> Result<Self> {
        Self::new(bounds.iter().map(|b| b[1] - b[0]).collect())
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.scales)
            .map(|((x, y), s)| ((x - y) / s).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Indices of the `k` nearest training points, nearest first; ties go to the
/// lower index. Distances are compared at [`SNAP_TOLERANCE`] resolution so
/// that rounding noise does not decide between geometrically equal
/// neighbours.
pub fn knn(
    metric: &ParamMetric,
    query: &[f64],
    points: &[Vec<f64>],
    k: usize,
) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::Domain(
            "nearest-neighbour query on an empty training set".into(),
        ));
    }
    if k == 0 || k > points.len() {
        return Err(Error::Config(format!(
            "k = {k} with {} training points",
            points.len()
        )));
    }
    let mut order: Vec<(i64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            (
                (metric.distance(query, p) / SNAP_TOLERANCE).round() as i64,
                i,
            )
        })
        .collect();
    order.sort_unstable();
    Ok(order.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Inverse-distance-squared weights summing to one. If any neighbour lies
/// within [`SNAP_TOLERANCE`], the nearest such neighbour gets all the weight.
pub fn pou_weights(distances: &[f64]) -> Vec<f64> {
    let snap = distances
        .iter()
        .enumerate()
        .filter(|(_, &d)| d < SNAP_TOLERANCE)
        .min_by(|a, b| a.1.total_cmp(b.1));
    if let Some((i, _)) = snap {
        let mut w = vec![0.0; distances.len()];
        w[i] = 1.0;
        return w;
    }
    let inv: Vec<f64> = distances.iter().map(|d| 1.0 / (d * d)).collect();
    let total: f64 = inv.iter().sum();
    inv.into_iter().map(|v| v / total).collect()
}

/// Interpolates coefficient matrices at `query` from its `k` nearest
/// training points.
pub fn interp_coeffs(
    metric: &ParamMetric,
    query: &[f64],
    points: &[Vec<f64>],
    coeffs: &[Array2<f64>],
    k: usize,
) -> Result<Array2<f64>> {
    if points.len() != coeffs.len() {
        return Err(Error::shape(
            "coefficient matrices",
            points.len(),
            coeffs.len(),
        ));
    }
    let idx = knn(metric, query, points, k)?;
    let dists: Vec<f64> = idx
        .iter()
        .map(|&i| metric.distance(query, &points[i]))
        .collect();
    let weights = pou_weights(&dists);
    let mut out = Array2::zeros(coeffs[idx[0]].raw_dim());
    for (&i, &w) in idx.iter().zip(&weights) {
        if w != 0.0 {
            out.scaled_add(w, &coeffs[i]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn corners() -> Vec<Vec<f64>> {
        vec![
            vec![0.7, 0.9],
            vec![0.7, 1.1],
            vec![0.9, 0.9],
            vec![0.9, 1.1],
        ]
    }

    fn metric() -> ParamMetric {
        ParamMetric::from_bounds(&[[0.7, 0.9], [0.9, 1.1]]).unwrap()
    }

    #[test]
    fn query_at_training_point_comes_first() {
        let idx = knn(&metric(), &[0.9, 0.9], &corners(), 4).unwrap();
        assert_eq!(idx[0], 2);
        assert_eq!(idx.len(), 4);
    }

    #[test]
    fn tie_break_prefers_lower_index() {
        // (0.7,1.1) and (0.9,0.9) are both at scaled distance sqrt(0.25^2+0.75^2)
        let idx = knn(&metric(), &[0.75, 0.95], &corners(), 2).unwrap();
        assert_eq!(idx, vec![0, 1]);
        let all = knn(&metric(), &[0.75, 0.95], &corners(), 4).unwrap();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(knn(&metric(), &[0.8, 1.0], &[], 1).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(pou_weights(&[0.3, 0.3]), vec![0.5, 0.5]);
        assert_eq!(pou_weights(&[0.2, 0.0, 0.4]), vec![0.0, 1.0, 0.0]);
        let w = pou_weights(&[1.0, 2.0]);
        assert_abs_diff_eq!(w[0], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn interpolation_examples() {
        let points = vec![vec![0.0, 0.0], vec![3.0, 0.0]];
        let coeffs = vec![array![[1.0]], array![[2.0]]];
        let m = ParamMetric::new(vec![1.0, 1.0]).unwrap();
        // distances 1 and 2 -> weights 0.8 / 0.2
        let xi = interp_coeffs(&m, &[1.0, 0.0], &points, &coeffs, 2).unwrap();
        assert_abs_diff_eq!(xi[(0, 0)], 1.2, epsilon = 1e-15);
        let at = interp_coeffs(&m, &[3.0, 0.0], &points, &coeffs, 2).unwrap();
        assert_eq!(at, array![[2.0]]);
        let same = vec![array![[0.5, -1.0]], array![[0.5, -1.0]]];
        let s = interp_coeffs(&m, &[1.3, 0.4], &points, &same, 2).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s[(0, 1)], -1.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn weights_partition_unity_and_interp_is_convex(
            qa in 0.7f64..0.9, qw in 0.9f64..1.1,
            vals in proptest::collection::vec(-5.0f64..5.0, 4),
            k in 1usize..=4,
        ) {
            let pts = corners();
            let coeffs: Vec<Array2<f64>> = vals.iter().map(|&v| array![[v]]).collect();
            let idx = knn(&metric(), &[qa, qw], &pts, k).unwrap();
            let d: Vec<f64> = idx.iter().map(|&i| metric().distance(&[qa, qw], &pts[i])).collect();
            let w = pou_weights(&d);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let xi = interp_coeffs(&metric(), &[qa, qw], &pts, &coeffs, k).unwrap()[(0, 0)];
            let lo = idx.iter().map(|&i| vals[i]).fold(f64::INFINITY, f64::min);
            let hi = idx.iter().map(|&i| vals[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(xi >= lo - 1e-12 && xi <= hi + 1e-12);
        }

        #[test]
        fn neighbour_order_does_not_matter(
            qa in 0.7f64..0.9, qw in 0.9f64..1.1,
            vals in proptest::collection::vec(-5.0f64..5.0, 4),
        ) {
            let pts = corners();
            let coeffs: Vec<Array2<f64>> = vals.iter().map(|&v| array![[v]]).collect();
            let a = interp_coeffs(&metric(), &[qa, qw], &pts, &coeffs, 4).unwrap()[(0, 0)];
            let rp: Vec<Vec<f64>> = pts.iter().rev().cloned().collect();
            let rc: Vec<Array2<f64>> = coeffs.iter().rev().cloned().collect();
            let b = interp_coeffs(&metric(), &[qa, qw], &rp, &rc, 4).unwrap()[(0, 0)];
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
