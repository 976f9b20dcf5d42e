//! Dataset-level evaluation drivers.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{PrismError, Result};
use crate::eval::geometry::{estimate_homography, estimate_pose, pose_error, RansacParams, RelativePose};
use crate::eval::metrics::{corner_error, ErrorCurve};
use crate::image::ImageTensor;
use crate::matcher::FineMatch;
use crate::model::{PairForward, PrismModel};
use crate::pipeline::dataset::DatasetEntry;
use crate::supervision::GroundTruthGeometry;

/// Nearest positive multiple of 32.
pub fn network_size(n: usize) -> usize {
    (((n as f64) / 32.0).round() as usize).max(1) * 32
}

/// Matches for images of any size. Images are resized to multiples of 32 and
/// match coordinates are mapped back into the original frames.
pub struct SizedMatches {
    pub matches: Vec<FineMatch>,
    pub forward: PairForward,
    /// Original / network size ratios `(sx, sy)` for A and B.
    pub scale_a: [f64; 2],
    pub scale_b: [f64; 2],
}

pub fn match_any_size(model: &PrismModel, a: &ImageTensor, b: &ImageTensor) -> Result<SizedMatches> {
    let resize = |img: &ImageTensor| -> (ImageTensor, [f64; 2]) {
        let (h, w) = (network_size(img.height()), network_size(img.width()));
        (
            img.resize(h, w),
            [img.width() as f64 / w as f64, img.height() as f64 / h as f64],
        )
    };
    let (ra, scale_a) = resize(a);
    let (rb, scale_b) = resize(b);
    let (set, forward) = model.match_images(&ra, &rb)?;
    let matches = set
        .fine
        .into_iter()
        .map(|mut m| {
            m.point_a = [m.point_a[0] * scale_a[0], m.point_a[1] * scale_a[1]];
            m.point_b = [m.point_b[0] * scale_b[0], m.point_b[1] * scale_b[1]];
            m
        })
        .collect();
    Ok(SizedMatches {
        matches,
        forward,
        scale_a,
        scale_b,
    })
}

fn split_points(matches: &[FineMatch]) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    matches.iter().map(|m| (m.point_a, m.point_b)).unzip()
}

/// Per-pair outcome; `error` is `+inf` when estimation failed.
#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub name: String,
    pub matches: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub pairs: Vec<PairResult>,
    pub curve: ErrorCurve,
}

fn finish(pairs: Vec<PairResult>, thresholds: &[f64]) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(PrismError::InvalidInput("dataset has no evaluable pairs".into()));
    }
    let curve = ErrorCurve::new(pairs.iter().map(|p| p.error).collect(), thresholds.to_vec())?;
    Ok(Evaluation { pairs, curve })
}

/// Corner error of the homography estimated from predicted matches.
pub fn homography_error(
    points_a: &[[f64; 2]],
    points_b: &[[f64; 2]],
    h_gt: &Matrix3<f64>,
    width: f64,
    height: f64,
    ransac: &RansacParams,
) -> f64 {
    match estimate_homography(points_a, points_b, ransac) {
        Ok((h, _)) => corner_error(&h, h_gt, width, height).unwrap_or(f64::INFINITY),
        Err(_) => f64::INFINITY,
    }
}

pub fn evaluate_homography(
    model: &PrismModel,
    entries: impl IntoIterator<Item = Result<DatasetEntry>>,
    thresholds: &[f64],
    ransac: &RansacParams,
) -> Result<Evaluation> {
    let mut pairs = Vec::new();
    for entry in entries {
        let entry = entry?;
        let GroundTruthGeometry::Homography(h_gt) = &entry.geometry else {
            log::warn!("{}: no homography, skipped", entry.pair.name);
            continue;
        };
        let m = match_any_size(model, &entry.pair.a, &entry.pair.b)?;
        let (pa, pb) = split_points(&m.matches);
        let (w, h) = (entry.pair.a.width() as f64, entry.pair.a.height() as f64);
        pairs.push(PairResult {
            name: entry.pair.name.clone(),
            matches: m.matches.len(),
            error: homography_error(&pa, &pb, h_gt, w, h, ransac),
        });
    }
    finish(pairs, thresholds)
}

pub fn evaluate_pose(
    model: &PrismModel,
    entries: impl IntoIterator<Item = Result<DatasetEntry>>,
    thresholds: &[f64],
    ransac: &RansacParams,
) -> Result<Evaluation> {
    let mut pairs = Vec::new();
    for entry in entries {
        let entry = entry?;
        let GroundTruthGeometry::DepthPose { camera_a, camera_b, .. } = &entry.geometry else {
            log::warn!("{}: no pose, skipped", entry.pair.name);
            continue;
        };
        let gt = RelativePose::between(camera_a, camera_b)?;
        let m = match_any_size(model, &entry.pair.a, &entry.pair.b)?;
        let (pa, pb) = split_points(&m.matches);
        let error = match estimate_pose(&pa, &pb, &camera_a.intrinsics, &camera_b.intrinsics, ransac) {
            Ok((est, _)) => pose_error(&est, &gt),
            Err(_) => f64::INFINITY,
        };
        pairs.push(PairResult {
            name: entry.pair.name.clone(),
            matches: m.matches.len(),
            error,
        });
    }
    finish(pairs, thresholds)
}

/// Reads precomputed poses: one line per pair, `name r11 r12 ... r33 t1 t2 t3`.
pub fn read_precomputed_poses(path: &Path) -> Result<HashMap<String, RelativePose>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| PrismError::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {m}", lineno + 1),
        };
        let mut parts = line.split_whitespace();
        let name = parts.next().expect("non-empty line").to_string();
        let v: Vec<f64> = parts
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("not a number: {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != 12 {
            return Err(bad(format!("expected 12 numbers after the name, found {}", v.len())));
        }
        let pose = RelativePose::new(Matrix3::from_row_slice(&v[..9]), Vector3::new(v[9], v[10], v[11]))
            .map_err(|e| bad(e.to_string()))?;
        out.insert(name, pose);
    }
    Ok(out)
}

/// Scores precomputed poses against the dataset ground truth. Pairs without
/// an entry count as failures.
pub fn evaluate_precomputed_poses(
    poses: &HashMap<String, RelativePose>,
    entries: impl IntoIterator<Item = Result<DatasetEntry>>,
    thresholds: &[f64],
) -> Result<Evaluation> {
    let mut pairs = Vec::new();
    for entry in entries {
        let entry = entry?;
        let GroundTruthGeometry::DepthPose { camera_a, camera_b, .. } = &entry.geometry else {
            continue;
        };
        let gt = RelativePose::between(camera_a, camera_b)?;
        let error = poses
            .get(&entry.pair.name)
            .map_or(f64::INFINITY, |est| pose_error(est, &gt));
        pairs.push(PairResult {
            name: entry.pair.name.clone(),
            matches: 0,
            error,
        });
    }
    finish(pairs, thresholds)
}
