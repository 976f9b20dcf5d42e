//! Homography and relative-pose estimation from point correspondences.
//!
//! Both estimators are normalized linear solvers wrapped in a fixed-iteration
//! seeded consensus loop and refit on the final inlier set.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PrismError, Result};
use crate::supervision::Camera;

/// Relative pose mapping camera-A coordinates into camera B: `x_B = R x_A + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    /// Unit direction.
    pub translation: Vector3<f64>,
}

impl RelativePose {
    /// Normalizes `t`; rejects non-rotations and zero translations.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || rotation.determinant() < 0.0 {
            return Err(PrismError::Geometry(format!(
                "not a rotation (|R^T R - I| = {ortho:e})"
            )));
        }
        let n = translation.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(PrismError::Geometry("translation direction is undefined".into()));
        }
        Ok(Self {
            rotation,
            translation: translation / n,
        })
    }

    /// Pose of camera B relative to camera A, both given world-to-camera.
    pub fn between(a: &Camera, b: &Camera) -> Result<Self> {
        let r = b.rotation * a.rotation.transpose();
        let t = b.translation - r * a.translation;
        Self::new(r, t)
    }
}

/// Rotation angle of `r` in degrees.
pub fn rotation_angle_deg(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = v.norm() / 2.0;
    s.atan2(c).to_degrees()
}

/// Angle between two lines through the origin, degrees.
pub fn direction_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b).abs()).to_degrees()
}

/// `max(angle(R_est^T R_gt), angle(t_est, t_gt))`, sign-agnostic in `t`.
pub fn pose_error(est: &RelativePose, gt: &RelativePose) -> f64 {
    let r = rotation_angle_deg(&(est.rotation.transpose() * gt.rotation));
    let t = direction_angle_deg(&est.translation, &gt.translation);
    r.max(t)
}

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
fn normalizer(points: &[[f64; 2]]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean = points
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean > 0.0 { 2f64.sqrt() / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, p: [f64; 2]) -> Vector3<f64> {
    t * Vector3::new(p[0], p[1], 1.0)
}

/// Right singular vector of the smallest singular value of `a` (`n x 9`).
fn null_vector(mut rows: Vec<[f64; 9]>) -> Result<[f64; 9]> {
    while rows.len() < 9 {
        rows.push([0.0; 9]);
    }
    let a = DMatrix::from_fn(rows.len(), 9, |r, c| rows[r][c]);
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| PrismError::Geometry("singular value decomposition failed".into()))?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nine singular values");
    let mut out = [0.0; 9];
    for (c, o) in out.iter_mut().enumerate() {
        *o = v_t[(k, c)];
    }
    Ok(out)
}

/// Normalized direct linear transform, `dst ~ H src`. Needs at least 4 pairs.
pub fn homography_dlt(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Matrix3<f64>> {
    if src.len() != dst.len() || src.len() < 4 {
        return Err(PrismError::Geometry(
            "homography needs at least 4 correspondences".into(),
        ));
    }
    let ts = normalizer(src);
    let td = normalizer(dst);
    let mut rows = Vec::with_capacity(2 * src.len());
    for (p, q) in src.iter().zip(dst) {
        let x = apply(&ts, *p);
        let y = apply(&td, *q);
        let (u, v, w) = (y.x, y.y, y.z);
        rows.push([0.0, 0.0, 0.0, -w * x.x, -w * x.y, -w * x.z, v * x.x, v * x.y, v * x.z]);
        rows.push([w * x.x, w * x.y, w * x.z, 0.0, 0.0, 0.0, -u * x.x, -u * x.y, -u * x.z]);
    }
    let h = Matrix3::from_row_slice(&null_vector(rows)?);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| PrismError::Geometry("degenerate point normalization".into()))?;
    let h = td_inv * h * ts;
    let scale = h[(2, 2)];
    let h = if scale.abs() > 1e-12 { h / scale } else { h / h.norm() };
    if !h.iter().all(|v| v.is_finite()) || h.determinant().abs() < 1e-12 * h.abs().max().powi(3) {
        return Err(PrismError::Geometry("degenerate homography".into()));
    }
    Ok(h)
}

fn transfer_error(h: &Matrix3<f64>, p: [f64; 2], q: [f64; 2]) -> f64 {
    let v = h * Vector3::new(p[0], p[1], 1.0);
    if v.z.abs() < 1e-12 {
        return f64::INFINITY;
    }
    ((v.x / v.z - q[0]).powi(2) + (v.y / v.z - q[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    /// Pixels: transfer error for homographies, Sampson distance for poses.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 1000,
            threshold: 3.0,
            seed: 0,
        }
    }
}

fn consensus<M>(
    n: usize,
    sample_size: usize,
    params: &RansacParams,
    fit: impl Fn(&[usize]) -> Result<Vec<M>>,
    inliers_of: impl Fn(&M) -> Vec<bool>,
) -> Option<(M, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(M, Vec<bool>, usize)> = None;
    for _ in 0..params.iterations.max(1) {
        let idx = sample(&mut rng, n, sample_size).into_vec();
        let Ok(models) = fit(&idx) else { continue };
        for m in models {
            let inl = inliers_of(&m);
            let count = inl.iter().filter(|&&b| b).count();
            if best.as_ref().is_none_or(|b| count > b.2) {
                best = Some((m, inl, count));
            }
        }
        if best.as_ref().is_some_and(|b| b.2 == n) {
            break;
        }
    }
    best.map(|(m, inl, _)| (m, inl))
}

/// Robust homography `b ~ H a` with inlier flags.
pub fn estimate_homography(a: &[[f64; 2]], b: &[[f64; 2]], params: &RansacParams) -> Result<(Matrix3<f64>, Vec<bool>)> {
    if a.len() != b.len() || a.len() < 4 {
        return Err(PrismError::Geometry(
            "homography needs at least 4 correspondences".into(),
        ));
    }
    let fit = |idx: &[usize]| -> Result<Vec<Matrix3<f64>>> {
        let src: Vec<_> = idx.iter().map(|&i| a[i]).collect();
        let dst: Vec<_> = idx.iter().map(|&i| b[i]).collect();
        Ok(vec![homography_dlt(&src, &dst)?])
    };
    let inliers_of = |h: &Matrix3<f64>| -> Vec<bool> {
        a.iter()
            .zip(b)
            .map(|(p, q)| transfer_error(h, *p, *q) <= params.threshold)
            .collect()
    };
    let (h, inl) = consensus(a.len(), 4, params, fit, inliers_of)
        .ok_or_else(|| PrismError::Geometry("no non-degenerate homography sample".into()))?;
    let idx: Vec<usize> = (0..a.len()).filter(|&i| inl[i]).collect();
    let refined = if idx.len() > 4 {
        fit(&idx).ok().map(|mut v| v.remove(0))
    } else {
        None
    };
    match refined {
        Some(r) => {
            let inl = inliers_of(&r);
            Ok((r, inl))
        }
        None => Ok((h, inl)),
    }
}

fn project_to_essential(e: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = e.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * v_t
}

/// Normalized eight-point essential matrix for calibrated points, `x_b^T E x_a = 0`.
pub fn essential_eight_point(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<Matrix3<f64>> {
    if a.len() != b.len() || a.len() < 8 {
        return Err(PrismError::NoPose(
            "essential matrix needs at least 8 correspondences".into(),
        ));
    }
    let ta = normalizer(a);
    let tb = normalizer(b);
    let rows = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            let x = apply(&ta, *p);
            let y = apply(&tb, *q);
            [
                y.x * x.x,
                y.x * x.y,
                y.x * x.z,
                y.y * x.x,
                y.y * x.y,
                y.y * x.z,
                y.z * x.x,
                y.z * x.y,
                y.z * x.z,
            ]
        })
        .collect();
    let e = Matrix3::from_row_slice(&null_vector(rows)?);
    let e = tb.transpose() * e * ta;
    let e = project_to_essential(&e);
    let n = e.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(PrismError::NoPose("degenerate essential matrix".into()));
    }
    Ok(e / n)
}

/// First-order geometric error of `x_b^T E x_a = 0`, in the units of the points.
pub fn sampson_distance(e: &Matrix3<f64>, a: [f64; 2], b: [f64; 2]) -> f64 {
    let x = Vector3::new(a[0], a[1], 1.0);
    let y = Vector3::new(b[0], b[1], 1.0);
    let ex = e * x;
    let ety = e.transpose() * y;
    let num = y.dot(&ex);
    let den = ex.x * ex.x + ex.y * ex.y + ety.x * ety.x + ety.y * ety.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (num * num / den).sqrt()
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// The four `(R, t)` factorizations of an essential matrix.
pub fn decompose_essential(e: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = e.svd(true, true);
    let mut u = svd.u.expect("u requested");
    let mut v_t = svd.v_t.expect("v_t requested");
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t = u.column(2).into_owned();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Depths of the linear triangulation of one correspondence in both cameras.
fn triangulated_depths(r: &Matrix3<f64>, t: &Vector3<f64>, a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    // Solve d_b y = d_a R x + t in least squares for (d_a, d_b).
    let x = Vector3::new(a[0], a[1], 1.0);
    let y = Vector3::new(b[0], b[1], 1.0);
    let rx = r * x;
    let m = nalgebra::Matrix3x2::from_columns(&[rx, -y]);
    let mtm = m.transpose() * m;
    match mtm.try_inverse() {
        Some(inv) => {
            let d = inv * (m.transpose() * (-t));
            (d[0], d[1])
        }
        None => (f64::NAN, f64::NAN),
    }
}

fn cheirality(
    candidates: &[(Matrix3<f64>, Vector3<f64>); 4],
    a: &[[f64; 2]],
    b: &[[f64; 2]],
) -> (Matrix3<f64>, Vector3<f64>) {
    let mut best = (candidates[0], 0usize);
    for cand in candidates {
        let front = a
            .iter()
            .zip(b)
            .filter(|(p, q)| {
                let (da, db) = triangulated_depths(&cand.0, &cand.1, **p, **q);
                da > 0.0 && db > 0.0
            })
            .count();
        if front > best.1 {
            best = (*cand, front);
        }
    }
    best.0
}

fn calibrate(k: &Matrix3<f64>, pts: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    let inv = k
        .try_inverse()
        .ok_or_else(|| PrismError::Geometry("camera intrinsics are singular".into()))?;
    Ok(pts
        .iter()
        .map(|p| {
            let v = inv * Vector3::new(p[0], p[1], 1.0);
            [v.x / v.z, v.y / v.z]
        })
        .collect())
}

/// Relative pose from pixel correspondences. `params.threshold` is a Sampson
/// distance in pixels, converted with the mean focal length.
pub fn estimate_pose(
    points_a: &[[f64; 2]],
    points_b: &[[f64; 2]],
    k_a: &Matrix3<f64>,
    k_b: &Matrix3<f64>,
    params: &RansacParams,
) -> Result<(RelativePose, Vec<bool>)> {
    if points_a.len() != points_b.len() {
        return Err(PrismError::NoPose("point lists differ in length".into()));
    }
    if points_a.len() < 8 {
        return Err(PrismError::NoPose(format!(
            "{} matches, need at least 8",
            points_a.len()
        )));
    }
    let a = calibrate(k_a, points_a)?;
    let b = calibrate(k_b, points_b)?;
    let focal = (k_a[(0, 0)] + k_a[(1, 1)] + k_b[(0, 0)] + k_b[(1, 1)]) / 4.0;
    let threshold = params.threshold / focal.abs().max(1e-12);
    let fit = |idx: &[usize]| -> Result<Vec<Matrix3<f64>>> {
        let sa: Vec<_> = idx.iter().map(|&i| a[i]).collect();
        let sb: Vec<_> = idx.iter().map(|&i| b[i]).collect();
        Ok(vec![essential_eight_point(&sa, &sb)?])
    };
    let inliers_of = |e: &Matrix3<f64>| -> Vec<bool> {
        a.iter()
            .zip(&b)
            .map(|(p, q)| sampson_distance(e, *p, *q) <= threshold)
            .collect()
    };
    let (mut e, mut inl) = consensus(a.len(), 8, params, fit, inliers_of)
        .ok_or_else(|| PrismError::NoPose("every sample was degenerate".into()))?;
    let idx: Vec<usize> = (0..a.len()).filter(|&i| inl[i]).collect();
    if idx.len() < 8 {
        return Err(PrismError::NoPose(format!("only {} inliers", idx.len())));
    }
    if idx.len() > 8 {
        if let Ok(mut refit) = fit(&idx) {
            e = refit.remove(0);
            inl = inliers_of(&e);
        }
    }
    let ia: Vec<_> = (0..a.len()).filter(|&i| inl[i]).map(|i| a[i]).collect();
    let ib: Vec<_> = (0..b.len()).filter(|&i| inl[i]).map(|i| b[i]).collect();
    if ia.len() < 8 {
        return Err(PrismError::NoPose(format!("only {} inliers", ia.len())));
    }
    let (r, t) = cheirality(&decompose_essential(&e), &ia, &ib);
    Ok((RelativePose::new(r, t)?, inl))
}

/// Essential matrix of a known pose, `[t]x R`.
pub fn essential_from_pose(pose: &RelativePose) -> Matrix3<f64> {
    skew(&pose.translation) * pose.rotation
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dlt_recovers_exact_homography() {
        let h = Matrix3::new(1.05, 0.1, 3.0, -0.05, 0.9, -2.0, 1e-3, -5e-4, 1.0);
        let src = [[0.0, 0.0], [50.0, 3.0], [7.0, 40.0], [60.0, 55.0], [25.0, 25.0]];
        let dst: Vec<[f64; 2]> = src
            .iter()
            .map(|p| {
                let v = h * Vector3::new(p[0], p[1], 1.0);
                [v.x / v.z, v.y / v.z]
            })
            .collect();
        let est = homography_dlt(&src, &dst).unwrap();
        assert!((est - h).abs().max() < 1e-9);
        let est4 = homography_dlt(&src[..4], &dst[..4]).unwrap();
        assert!((est4 - h).abs().max() < 1e-9);
    }

    #[test]
    fn rotation_angles() {
        let r = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), 10f64.to_radians());
        assert!((rotation_angle_deg(r.matrix()) - 10.0).abs() < 1e-12);
        assert_eq!(rotation_angle_deg(&Matrix3::identity()), 0.0);
        let t = Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(direction_angle_deg(&t, &-t), 0.0);
    }

    #[test]
    fn seven_matches_is_no_pose() {
        let p = [[0.0, 0.0]; 7];
        let k = Matrix3::identity();
        assert!(matches!(
            estimate_pose(&p, &p, &k, &k, &RansacParams::default()),
            Err(PrismError::NoPose(_))
        ));
    }
}
