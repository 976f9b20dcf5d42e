//! Corner error, exact AUC and match-quality counters.

use std::collections::HashSet;

use nalgebra::{Matrix3, Vector3};

use crate::error::{PrismError, Result};
use crate::grid::PatchMask;
use crate::matcher::CoarseMatch;

fn is_invertible(h: &Matrix3<f64>) -> bool {
    let scale = h.abs().max();
    h.iter().all(|v| v.is_finite()) && scale > 0.0 && h.determinant().abs() > 1e-12 * scale.powi(3)
}

fn warp(h: &Matrix3<f64>, x: f64, y: f64) -> Result<[f64; 2]> {
    let v = h * Vector3::new(x, y, 1.0);
    if v.z.abs() < 1e-300 {
        return Err(PrismError::Geometry("corner maps to infinity".into()));
    }
    Ok([v.x / v.z, v.y / v.z])
}

/// Image corners in the order (0,0), (W,0), (0,H), (W,H).
pub fn corners(width: f64, height: f64) -> [[f64; 2]; 4] {
    [[0.0, 0.0], [width, 0.0], [0.0, height], [width, height]]
}

/// Mean distance between the image corners warped by `h_est` and by `h_gt`.
pub fn corner_error(h_est: &Matrix3<f64>, h_gt: &Matrix3<f64>, width: f64, height: f64) -> Result<f64> {
    if !is_invertible(h_est) || !is_invertible(h_gt) {
        return Err(PrismError::Geometry(
            "corner error needs invertible homographies".into(),
        ));
    }
    let mut total = 0.0;
    for [x, y] in corners(width, height) {
        let a = warp(h_est, x, y)?;
        let b = warp(h_gt, x, y)?;
        total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    }
    Ok(total / 4.0)
}

/// `(1/T) * integral_0^T frac(err <= t) dt`, integrated exactly over the step
/// CDF: each error `e` contributes `max(0, T - e) / T`.
pub fn auc(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(PrismError::InvalidInput("AUC of an empty error list".into()));
    }
    if !(threshold > 0.0) {
        return Err(PrismError::InvalidInput(format!(
            "AUC threshold {threshold} must be positive"
        )));
    }
    if errors.iter().any(|e| !(*e >= 0.0)) {
        return Err(PrismError::InvalidInput("errors must be non-negative".into()));
    }
    let sum: f64 = errors.iter().map(|&e| (threshold - e).max(0.0)).sum();
    Ok(sum / (threshold * errors.len() as f64))
}

/// Sorted per-pair errors with the thresholds they are summarized at.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    errors: Vec<f64>,
    thresholds: Vec<f64>,
}

impl ErrorCurve {
    /// Non-finite errors (failed estimates) are kept as `+inf`.
    pub fn new(mut errors: Vec<f64>, thresholds: Vec<f64>) -> Result<Self> {
        if errors.iter().any(|e| e.is_nan() || *e < 0.0) {
            return Err(PrismError::InvalidInput("errors must be non-negative".into()));
        }
        if thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(PrismError::InvalidInput("thresholds must be positive".into()));
        }
        errors.sort_by(|a, b| a.total_cmp(b));
        Ok(Self { errors, thresholds })
    }

    pub fn errors(&self) -> &[f64] {
        &self.errors
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn aucs(&self) -> Result<Vec<f64>> {
        self.thresholds.iter().map(|&t| auc(&self.errors, t)).collect()
    }

    /// Fraction of errors `<= t`.
    pub fn cdf(&self, t: f64) -> f64 {
        if self.errors.is_empty() {
            return 0.0;
        }
        self.errors.partition_point(|&e| e <= t) as f64 / self.errors.len() as f64
    }
}

/// Counts for coarse-match precision and recall.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MatchCounts {
    pub predicted: usize,
    pub correct: usize,
    pub ground_truth: usize,
    pub recalled: usize,
}

impl MatchCounts {
    /// A prediction is correct when it is exactly one of the ground-truth pairs.
    pub fn of(predicted: &[CoarseMatch], ground_truth: &[(usize, usize)]) -> Self {
        let gt: HashSet<(usize, usize)> = ground_truth.iter().copied().collect();
        let pred: HashSet<(usize, usize)> = predicted.iter().map(|m| (m.i, m.j)).collect();
        let correct = pred.intersection(&gt).count();
        Self {
            predicted: pred.len(),
            correct,
            ground_truth: gt.len(),
            recalled: correct,
        }
    }

    pub fn add(&mut self, other: &MatchCounts) {
        self.predicted += other.predicted;
        self.correct += other.correct;
        self.ground_truth += other.ground_truth;
        self.recalled += other.recalled;
    }

    /// 0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.correct as f64 / self.predicted as f64
        }
    }

    /// 1 when there was nothing to recall.
    pub fn recall(&self) -> f64 {
        if self.ground_truth == 0 {
            1.0
        } else {
            self.recalled as f64 / self.ground_truth as f64
        }
    }
}

/// Matchable patches `(kept, total)` retained by `mask`.
pub fn mask_retention(mask: &PatchMask, matchable: &[bool]) -> Result<(usize, usize)> {
    if matchable.len() != mask.keep().len() {
        return Err(PrismError::Shape("matchable flags and mask differ in length".into()));
    }
    let total = matchable.iter().filter(|&&m| m).count();
    let kept = matchable.iter().zip(mask.keep()).filter(|(&m, &k)| m && k).count();
    Ok((kept, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_hand_values() {
        assert_eq!(auc(&[0.0, 0.0], 3.0).unwrap(), 1.0);
        assert!((auc(&[1.0, 2.0, 4.0], 4.0).unwrap() - 5.0 / 12.0).abs() < 1e-15);
        assert_eq!(auc(&[3.0], 3.0).unwrap(), 0.0);
        assert_eq!(auc(&[3.0], 10.0).unwrap(), 0.7);
        assert!(auc(&[], 3.0).is_err());
        assert!(auc(&[1.0], 0.0).is_err());
    }

    #[test]
    fn translation_moves_corners_three_pixels() {
        let h = Matrix3::new(1.1, 0.02, 3.0, -0.01, 0.95, 1.0, 1e-4, 0.0, 1.0);
        let shift = Matrix3::new(1.0, 0.0, 3.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(corner_error(&h, &h, 64.0, 48.0).unwrap(), 0.0);
        let e = corner_error(&(shift * h), &h, 64.0, 48.0).unwrap();
        assert!((e - 3.0).abs() < 1e-12);
        assert!(corner_error(&Matrix3::zeros(), &h, 64.0, 48.0).is_err());
    }

    #[test]
    fn counts_are_exact_membership() {
        let m = |i, j| CoarseMatch { i, j, confidence: 0.5 };
        let c = MatchCounts::of(&[m(0, 0), m(1, 2), m(2, 2)], &[(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(c.correct, 2);
        assert!((c.precision() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.recall(), 0.5);
    }
}
