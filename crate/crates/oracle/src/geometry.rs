//! Pose and homography evaluation on synthesized, noise-free correspondences.

use nalgebra::{Matrix3, Vector3};
use prism_core::eval::geometry::{estimate_homography, estimate_pose, RansacParams};
use prism_core::eval::metrics::{auc, corner_error, ErrorCurve};
use prism_core::pipeline::synth::{sample_homography, HomographyBounds};
use prism_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::reference::{axis_angle, corner_distance, direction_error_deg, project, rotation_error_deg};
use crate::report::Suite;

fn intrinsics() -> Matrix3<f64> {
    Matrix3::new(500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Projects `n` random points visible from camera A (identity pose) and from
/// camera B (`x_B = R x_A + t`).
fn synthesize(rng: &mut ChaCha8Rng, r: &Matrix3<f64>, t: &Vector3<f64>, n: usize) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let k = intrinsics();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    while a.len() < n {
        let x = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(3.0..8.0),
        );
        let y = r * x + t;
        if y.z > 0.5 {
            a.push(project(&k, &x));
            b.push(project(&k, &y));
        }
    }
    (a, b)
}

/// Worst rotation and translation-direction error of the estimate, in degrees.
fn pose_trial(rng: &mut ChaCha8Rng, r: Matrix3<f64>, t: Vector3<f64>, n: usize) -> Result<f64> {
    let (a, b) = synthesize(rng, &r, &t, n);
    let k = intrinsics();
    let (pose, inliers) = estimate_pose(&a, &b, &k, &k, &RansacParams::default())?;
    if inliers.iter().filter(|&&i| i).count() < 20 {
        return Ok(f64::INFINITY);
    }
    Ok(rotation_error_deg(&pose.rotation, &r).max(direction_error_deg(&pose.translation, &t)))
}

pub fn suite() -> Result<Suite> {
    let mut suite = Suite::new("geometry and evaluation metrics");
    let mut rng = ChaCha8Rng::seed_from_u64(23);

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let r = axis_angle(random_unit(&mut rng), rng.random_range(0.0..30.0));
        let t = random_unit(&mut rng);
        worst = worst.max(pose_trial(&mut rng, r, t, 50)?);
    }
    suite.within("relative pose from 100 noise-free trials (degrees)", worst, 0.1);
    let t = random_unit(&mut rng);
    let err = pose_trial(&mut rng, axis_angle(Vector3::z(), 10.0), t, 50)?;
    suite.within("10 degree rotation about z (degrees)", err, 0.1);

    let (w, h) = (128.0, 128.0);
    let mut errors = Vec::new();
    let mut disagreement = 0.0f64;
    for _ in 0..20 {
        let h_gt = sample_homography(&mut rng, &HomographyBounds::moderate(), 128, 128)?;
        let mut pa = Vec::new();
        let mut pb = Vec::new();
        for y in (4..128).step_by(8) {
            for x in (4..128).step_by(8) {
                let v = h_gt * Vector3::new(x as f64, y as f64, 1.0);
                let q = [v.x / v.z, v.y / v.z];
                if (0.0..w).contains(&q[0]) && (0.0..h).contains(&q[1]) {
                    pa.push([x as f64, y as f64]);
                    pb.push(q);
                }
            }
        }
        let (h_est, _) = estimate_homography(&pa, &pb, &RansacParams::default())?;
        let e = corner_error(&h_est, &h_gt, w, h)?;
        disagreement = disagreement.max((e - corner_distance(&h_est, &h_gt, w, h)).abs());
        errors.push(e);
    }
    let curve = ErrorCurve::new(errors, vec![1.0, 3.0, 5.0, 10.0])?;
    let aucs = curve.aucs()?;
    let gap = aucs.iter().map(|a| (a - 1.0).abs()).fold(0.0, f64::max);
    suite.within(
        "perfect matcher on 20 homography pairs: |AUC - 1| at 1/3/5/10 px",
        gap,
        1e-9,
    );
    suite.within("corner error agrees with explicit corner warp", disagreement, 1e-9);

    let constant = vec![3.0; 20];
    let at3 = auc(&constant, 3.0)?;
    let at10 = auc(&constant, 10.0)?;
    suite.check("constant 3 px error: AUC@3 = 0", at3 == 0.0, format!("{at3}"));
    suite.check("constant 3 px error: AUC@10 = 0.7", at10 == 0.7, format!("{at10}"));

    let errs: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..12.0)).collect();
    let mut prev = 0.0;
    let mut monotone = true;
    for t in 1..=30 {
        let a = auc(&errs, t as f64 * 0.5)?;
        monotone &= a >= prev;
        prev = a;
    }
    suite.check("AUC non-decreasing in the threshold", monotone, "thresholds 0.5..15 px");
    Ok(suite)
}

#[cfg(test)]
mod tests {
    #[test]
    fn suite_passes() {
        let s = super::suite().unwrap();
        assert!(s.passed(), "{s}");
    }
}
