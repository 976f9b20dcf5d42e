//! Ground-truth correspondences and the three training losses.

use candle_core::{Tensor, D};
use nalgebra::{Matrix3, Vector3};

use crate::error::{PrismError, Result};
use crate::grid::CoarseGrid;
use crate::nn::to_vec_f64;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-9;
/// Relative tolerance of the depth-consistency check.
pub const DEPTH_TOLERANCE: f64 = 0.2;

/// Dense depth raster; non-positive entries are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(PrismError::Shape(format!(
                "depth map has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Depth of the pixel containing the point, if valid.
    pub fn at(&self, p: [f64; 2]) -> Option<f64> {
        if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] < self.width as f64 && p[1] < self.height as f64) {
            return None;
        }
        let d = self.data[p[1] as usize * self.width + p[0] as usize] as f64;
        (d > 0.0 && d.is_finite()).then_some(d)
    }
}

/// Pinhole camera with a world-to-camera pose: `X_cam = R X_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if orth > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(PrismError::Geometry("camera rotation is not a proper rotation".into()));
        }
        if self.intrinsics.try_inverse().is_none() {
            return Err(PrismError::Geometry("camera intrinsics are singular".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruthGeometry {
    /// Maps image-A points to image-B points.
    Homography(Matrix3<f64>),
    DepthPose {
        camera_a: Camera,
        camera_b: Camera,
        depth_a: DepthMap,
        depth_b: DepthMap,
    },
}

fn apply_homography(h: &Matrix3<f64>, p: [f64; 2]) -> Option<[f64; 2]> {
    let v = h * Vector3::new(p[0], p[1], 1.0);
    (v.z.abs() > 1e-12).then(|| [v.x / v.z, v.y / v.z])
}

/// Projects `p` from the source camera into the target camera through the
/// source depth, rejecting occluded points via the target depth.
fn reproject(p: [f64; 2], src: &Camera, dst: &Camera, src_depth: &DepthMap, dst_depth: &DepthMap) -> Option<[f64; 2]> {
    let d = src_depth.at(p)?;
    let ray = src.intrinsics.try_inverse()? * Vector3::new(p[0], p[1], 1.0);
    let x_src = ray * d;
    let x_world = src.rotation.transpose() * (x_src - src.translation);
    let x_dst = dst.rotation * x_world + dst.translation;
    if x_dst.z <= 0.0 {
        return None;
    }
    let q = dst.intrinsics * (x_dst / x_dst.z);
    let q = [q.x, q.y];
    if let Some(dd) = dst_depth.at(q) {
        if (x_dst.z - dd).abs() > DEPTH_TOLERANCE * dd {
            return None;
        }
    }
    Some(q)
}

impl GroundTruthGeometry {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Homography(h) => {
                let scale = h.abs().max();
                if !h.iter().all(|v| v.is_finite()) || scale == 0.0 || h.determinant().abs() <= 1e-12 * scale.powi(3) {
                    return Err(PrismError::Geometry("homography is not invertible".into()));
                }
                Ok(())
            }
            Self::DepthPose { camera_a, camera_b, .. } => {
                camera_a.validate()?;
                camera_b.validate()
            }
        }
    }

    pub fn warp_a_to_b(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        match self {
            Self::Homography(h) => apply_homography(h, p),
            Self::DepthPose {
                camera_a,
                camera_b,
                depth_a,
                depth_b,
            } => reproject(p, camera_a, camera_b, depth_a, depth_b),
        }
    }

    pub fn warp_b_to_a(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        match self {
            Self::Homography(h) => apply_homography(&h.try_inverse()?, p),
            Self::DepthPose {
                camera_a,
                camera_b,
                depth_a,
                depth_b,
            } => reproject(p, camera_b, camera_a, depth_b, depth_a),
        }
    }

    /// Geometry of the swapped pair (B, A).
    pub fn swapped(&self) -> Result<Self> {
        match self {
            Self::Homography(h) => h
                .try_inverse()
                .map(Self::Homography)
                .ok_or_else(|| PrismError::Geometry("homography is not invertible".into())),
            Self::DepthPose {
                camera_a,
                camera_b,
                depth_a,
                depth_b,
            } => Ok(Self::DepthPose {
                camera_a: camera_b.clone(),
                camera_b: camera_a.clone(),
                depth_a: depth_b.clone(),
                depth_b: depth_a.clone(),
            }),
        }
    }
}

/// Coarse ground truth for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionLabels {
    /// Mutual-nearest ground-truth matches `(i, j)`.
    pub matches: Vec<(usize, usize)>,
    pub matchable_a: Vec<bool>,
    pub matchable_b: Vec<bool>,
    /// Continuous warp of each match's A-side refinement anchor into image B.
    pub fine_targets: Vec<Option<[f64; 2]>>,
}

impl SupervisionLabels {
    pub fn unmatchable_a(&self) -> Vec<usize> {
        indices_where(&self.matchable_a, false)
    }

    pub fn unmatchable_b(&self) -> Vec<usize> {
        indices_where(&self.matchable_b, false)
    }

    pub fn matchable_a_indices(&self) -> Vec<usize> {
        indices_where(&self.matchable_a, true)
    }

    pub fn matchable_b_indices(&self) -> Vec<usize> {
        indices_where(&self.matchable_b, true)
    }
}

fn indices_where(v: &[bool], value: bool) -> Vec<usize> {
    v.iter()
        .enumerate()
        .filter_map(|(i, &b)| (b == value).then_some(i))
        .collect()
}

/// Projects every coarse cell center in both directions, snaps to the
/// containing cell and keeps mutual nearest pairs.
pub fn ground_truth_coarse(
    geometry: &GroundTruthGeometry,
    grid_a: CoarseGrid,
    grid_b: CoarseGrid,
) -> Result<SupervisionLabels> {
    geometry.validate()?;
    let a_to_b: Vec<Option<usize>> = (0..grid_a.len())
        .map(|i| geometry.warp_a_to_b(grid_a.center(i)).and_then(|q| grid_b.cell_at(q)))
        .collect();
    let b_to_a: Vec<Option<usize>> = (0..grid_b.len())
        .map(|j| geometry.warp_b_to_a(grid_b.center(j)).and_then(|q| grid_a.cell_at(q)))
        .collect();
    let mut matches = Vec::new();
    let mut matchable_a = vec![false; grid_a.len()];
    let mut matchable_b = vec![false; grid_b.len()];
    let mut fine_targets = Vec::new();
    for (i, cand) in a_to_b.iter().enumerate() {
        if let Some(j) = *cand {
            if b_to_a[j] == Some(i) {
                matches.push((i, j));
                matchable_a[i] = true;
                matchable_b[j] = true;
                fine_targets.push(geometry.warp_a_to_b(grid_a.anchor_point(i)));
            }
        }
    }
    Ok(SupervisionLabels {
        matches,
        matchable_a,
        matchable_b,
        fine_targets,
    })
}

/// Conditions met while computing losses that a caller may want to report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossWarnings {
    pub empty_coarse: usize,
    pub empty_fine: usize,
    pub empty_matchable: usize,
    pub empty_unmatchable: usize,
    /// Probabilities that hit the lower clamp.
    pub clamped: usize,
}

impl LossWarnings {
    pub fn merge(&mut self, other: &LossWarnings) {
        self.empty_coarse += other.empty_coarse;
        self.empty_fine += other.empty_fine;
        self.empty_matchable += other.empty_matchable;
        self.empty_unmatchable += other.empty_unmatchable;
        self.clamped += other.clamped;
    }
}

fn scalar_zero(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), like.dtype(), like.device())?)
}

/// `L_c = -mean log P(i, j)` over the ground-truth matches.
pub fn coarse_loss(p: &Tensor, matches: &[(usize, usize)], warnings: &mut LossWarnings) -> Result<Tensor> {
    let (m, n) = p.dims2()?;
    if matches.is_empty() {
        warnings.empty_coarse += 1;
        return scalar_zero(p);
    }
    let mut idx = Vec::with_capacity(matches.len());
    for &(i, j) in matches {
        if i >= m || j >= n {
            return Err(PrismError::Shape(format!("match ({i}, {j}) outside a {m}x{n} matrix")));
        }
        idx.push((i * n + j) as u32);
    }
    let idx = Tensor::from_vec(idx, matches.len(), p.device())?;
    let picked = p.flatten_all()?.index_select(&idx, 0)?;
    warnings.clamped += to_vec_f64(&picked)?.iter().filter(|&&v| v < PROB_CLAMP).count();
    Ok(picked.clamp(PROB_CLAMP, f64::INFINITY)?.log()?.mean_all()?.neg()?)
}

/// `L_f = mean (1 / phi^2) |pred - target|_2`; `phi` is used as a constant.
pub fn fine_loss(pred: &Tensor, target: &Tensor, phi: &Tensor, warnings: &mut LossWarnings) -> Result<Tensor> {
    let (n, two) = pred.dims2()?;
    if two != 2 || target.dims() != [n, 2] || phi.dims() != [n] {
        return Err(PrismError::Shape("fine loss operands disagree".into()));
    }
    if n == 0 {
        warnings.empty_fine += 1;
        return scalar_zero(pred);
    }
    let dist = (pred - target)?.sqr()?.sum(D::Minus1)?.sqrt()?;
    let weight = phi.detach().sqr()?.recip()?;
    Ok((dist * weight)?.mean_all()?)
}

fn side_pruning_loss(scores: &Tensor, matchable: &[bool], warnings: &mut LossWarnings) -> Result<Tensor> {
    if scores.dims() != [matchable.len()] {
        return Err(PrismError::Shape("score and label counts differ".into()));
    }
    let sigma = scores.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let mut total = scalar_zero(scores)?;
    for positive in [true, false] {
        let idx: Vec<u32> = indices_where(matchable, positive)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        if idx.is_empty() {
            if positive {
                warnings.empty_matchable += 1;
            } else {
                warnings.empty_unmatchable += 1;
            }
            continue;
        }
        let n = idx.len();
        let picked = sigma.index_select(&Tensor::from_vec(idx, n, scores.device())?, 0)?;
        let term = if positive {
            picked.log()?
        } else {
            picked.affine(-1.0, 1.0)?.log()?
        };
        total = (total - term.mean_all()?)?;
    }
    Ok(total)
}

/// `L_p = (1/L) sum_l (L_p^A(l) + L_p^B(l)) / 2` over per-layer scores.
pub fn pruning_loss(
    scores_a: &[Tensor],
    scores_b: &[Tensor],
    matchable_a: &[bool],
    matchable_b: &[bool],
    warnings: &mut LossWarnings,
) -> Result<Tensor> {
    if scores_a.is_empty() || scores_a.len() != scores_b.len() {
        return Err(PrismError::Shape(
            "score histories must be non-empty and equally long".into(),
        ));
    }
    let mut total = scalar_zero(&scores_a[0])?;
    for (sa, sb) in scores_a.iter().zip(scores_b) {
        let la = side_pruning_loss(sa, matchable_a, warnings)?;
        let lb = side_pruning_loss(sb, matchable_b, warnings)?;
        total = (total + ((la + lb)? * 0.5)?)?;
    }
    Ok((total / scores_a.len() as f64)?)
}

/// Loss weights; all ones reproduces the plain sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub coarse: f64,
    pub fine: f64,
    pub pruning: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            coarse: 1.0,
            fine: 1.0,
            pruning: 1.0,
        }
    }
}

pub fn total_loss(coarse: &Tensor, fine: &Tensor, pruning: &Tensor, weights: LossWeights) -> Result<Tensor> {
    Ok(((coarse * weights.coarse)? + (fine * weights.fine)?)?.add(&(pruning * weights.pruning)?)?)
}

/// Scalar values of one loss evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBundle {
    pub coarse: f64,
    pub fine: f64,
    pub pruning: f64,
    pub total: f64,
    pub phi: Vec<f64>,
    pub warnings: LossWarnings,
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn identity_homography_matches_every_cell() {
        let g = CoarseGrid::new(4, 5);
        let labels = ground_truth_coarse(&GroundTruthGeometry::Homography(Matrix3::identity()), g, g).unwrap();
        assert_eq!(labels.matches, (0..20).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(labels.unmatchable_a().is_empty());
        assert!(labels.unmatchable_b().is_empty());
    }

    #[test]
    fn eight_pixel_shift_moves_one_column() {
        let g = CoarseGrid::new(3, 4);
        let mut h = Matrix3::identity();
        h[(0, 2)] = 8.0;
        let labels = ground_truth_coarse(&GroundTruthGeometry::Homography(h), g, g).unwrap();
        let mut expected = Vec::new();
        for r in 0..3 {
            for c in 0..3 {
                expected.push((g.index(r, c), g.index(r, c + 1)));
            }
        }
        assert_eq!(labels.matches, expected);
        assert_eq!(labels.unmatchable_a(), vec![3, 7, 11]);
        assert_eq!(labels.unmatchable_b(), vec![0, 4, 8]);
        for (k, &(i, _)) in labels.matches.iter().enumerate() {
            let a = g.anchor_point(i);
            assert_eq!(labels.fine_targets[k], Some([a[0] + 8.0, a[1]]));
        }
    }

    #[test]
    fn singular_homography_rejected() {
        let g = CoarseGrid::new(2, 2);
        let h = Matrix3::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0);
        assert!(ground_truth_coarse(&GroundTruthGeometry::Homography(h), g, g).is_err());
    }

    #[test]
    fn coarse_loss_values() {
        let mut w = LossWarnings::default();
        let p = Tensor::new(&[[1.0f64, 0.2], [0.3, 1.0]], &Device::Cpu).unwrap();
        assert_eq!(scalar(&coarse_loss(&p, &[(0, 0), (1, 1)], &mut w).unwrap()), 0.0);
        let p = Tensor::new(&[[(-1.0f64).exp()]], &Device::Cpu).unwrap();
        let l = scalar(&coarse_loss(&p, &[(0, 0)], &mut w).unwrap());
        assert!((l - 1.0).abs() < 1e-15);
        assert_eq!(scalar(&coarse_loss(&p, &[], &mut w).unwrap()), 0.0);
        assert_eq!(w.empty_coarse, 1);
    }

    #[test]
    fn fine_loss_values() {
        let mut w = LossWarnings::default();
        let pred = Tensor::new(&[[1.0f64, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap();
        let phi = vec_t(&[1.0, 0.5]);
        assert_eq!(scalar(&fine_loss(&pred, &pred, &phi, &mut w).unwrap()), 0.0);
        let pred = Tensor::new(&[[0.0f64, 0.0]], &Device::Cpu).unwrap();
        let target = Tensor::new(&[[2.0f64, 0.0]], &Device::Cpu).unwrap();
        let l = scalar(&fine_loss(&pred, &target, &vec_t(&[1.0]), &mut w).unwrap());
        assert_eq!(l, 2.0);
    }

    #[test]
    fn pruning_loss_at_half() {
        let mut w = LossWarnings::default();
        let s = vec_t(&[0.5; 4]);
        // Both label sets populated: each side contributes ln 2 twice.
        let l = scalar(
            &pruning_loss(
                &[s.clone()],
                &[s.clone()],
                &[true, false, true, false],
                &[false, true, true, true],
                &mut w,
            )
            .unwrap(),
        );
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        // Only matchable patches: the unmatchable mean is omitted.
        let l = scalar(&pruning_loss(&[s.clone()], &[s], &[true; 4], &[true; 4], &mut w).unwrap());
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(w.empty_unmatchable, 2);
    }

    #[test]
    fn pruning_loss_perfect_classifier() {
        let mut w = LossWarnings::default();
        let s = vec_t(&[1.0, 0.0, 1.0]);
        let l = scalar(&pruning_loss(&[s.clone()], &[s], &[true, false, true], &[true, false, true], &mut w).unwrap());
        assert!(l < 1e-8);
    }

    #[test]
    fn total_is_plain_sum() {
        let t = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let w = LossWeights::default();
        assert_eq!(scalar(&total_loss(&t(0.0), &t(0.0), &t(0.0), w).unwrap()), 0.0);
        assert_eq!(scalar(&total_loss(&t(1.0), &t(2.0), &t(3.0), w).unwrap()), 6.0);
    }
}
