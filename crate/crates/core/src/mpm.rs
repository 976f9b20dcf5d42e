//! Multi-scale pruning module stack.
//!
//! Each layer runs self-SADPA on both images, cross-SADPA in both directions
//! from the post-self features, estimates a per-patch relevance score with a
//! small perceptron and prunes patches scoring below `theta_p`. Masks only ever
//! lose entries.

use candle_core::Tensor;

use crate::error::{PrismError, Result};
use crate::grid::{CoarseGrid, PatchMask};
use crate::nn::{self, Linear, ParamStore};
use crate::sadpa::{AttentionMode, Sadpa, SadpaConfig};

/// Default pruning threshold.
pub const DEFAULT_THETA_P: f64 = 0.05;

/// Per-layer relevance estimator: affine, ReLU, affine to one logit, sigmoid.
pub struct NmiEstimator {
    fc1: Linear,
    fc2: Linear,
}

impl NmiEstimator {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::with_gain(store, &format!("{name}.fc1"), dim, dim, true, 2f64.sqrt())?,
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, 1, true)?,
        })
    }

    pub fn from_layers(fc1: Linear, fc2: Linear) -> Self {
        Self { fc1, fc2 }
    }

    /// Scores in `(0, 1)` for tokens `[N, C]`, returned as `[N]`.
    pub fn estimate(&self, features: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(features)?.relu()?;
        let logit = self.fc2.forward(&h)?.squeeze(1)?;
        nn::sigmoid(&logit)
    }
}

/// `M[i] = M_prev[i] && sigma[i] >= theta_p`.
pub fn update_mask(scores: &[f64], theta_p: f64, prev: &PatchMask) -> Result<PatchMask> {
    if scores.len() != prev.keep().len() {
        return Err(PrismError::Shape(format!(
            "{} scores for a mask of {} patches",
            scores.len(),
            prev.keep().len()
        )));
    }
    let keep = prev
        .keep()
        .iter()
        .zip(scores)
        .map(|(&k, &s)| k && s >= theta_p)
        .collect();
    PatchMask::from_vec(prev.grid(), keep)
}

/// Inputs and outputs of one image side within a layer.
#[derive(Debug, Clone)]
pub struct SideState {
    pub features: Tensor,
    pub mask: PatchMask,
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub a: SideState,
    pub b: SideState,
    pub scores_a: Tensor,
    pub scores_b: Tensor,
}

pub struct MpmLayer {
    self_attn: Sadpa,
    cross_attn: Sadpa,
    estimator: NmiEstimator,
}

impl MpmLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let self_attn = Sadpa::new(
            store,
            &format!("{name}.self"),
            SadpaConfig {
                dim,
                heads,
                mode: AttentionMode::SelfAttention,
            },
        )?;
        let cross_attn = Sadpa::new(
            store,
            &format!("{name}.cross"),
            SadpaConfig {
                dim,
                heads,
                mode: AttentionMode::Cross,
            },
        )?;
        let estimator = NmiEstimator::new(store, &format!("{name}.nmi"), dim)?;
        Ok(Self {
            self_attn,
            cross_attn,
            estimator,
        })
    }

    pub fn self_attn(&self) -> &Sadpa {
        &self.self_attn
    }

    pub fn cross_attn(&self) -> &Sadpa {
        &self.cross_attn
    }

    pub fn estimator(&self) -> &NmiEstimator {
        &self.estimator
    }

    /// One layer update. `layer` is 1-based and only used in error reports.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        a: &SideState,
        b: &SideState,
        grid_a: CoarseGrid,
        grid_b: CoarseGrid,
        coords_a: &Tensor,
        coords_b: &Tensor,
        theta_p: f64,
        layer: usize,
    ) -> Result<LayerOutput> {
        let self_a = self
            .self_attn
            .forward(
                &a.features,
                &a.features,
                &a.mask,
                &a.mask,
                grid_a,
                grid_a,
                Some(coords_a),
            )?
            .features;
        let self_b = self
            .self_attn
            .forward(
                &b.features,
                &b.features,
                &b.mask,
                &b.mask,
                grid_b,
                grid_b,
                Some(coords_b),
            )?
            .features;
        let cross_a = self
            .cross_attn
            .forward(&self_a, &self_b, &a.mask, &b.mask, grid_a, grid_b, None)?
            .features;
        let cross_b = self
            .cross_attn
            .forward(&self_b, &self_a, &b.mask, &a.mask, grid_b, grid_a, None)?
            .features;
        let scores_a = self.estimator.estimate(&cross_a)?;
        let scores_b = self.estimator.estimate(&cross_b)?;
        let mask_a = update_mask(&nn::to_vec_f64(&scores_a)?, theta_p, &a.mask)?;
        let mask_b = update_mask(&nn::to_vec_f64(&scores_b)?, theta_p, &b.mask)?;
        if mask_a.all_zero() {
            return Err(PrismError::DegeneratePruning { image: 'A', layer });
        }
        if mask_b.all_zero() {
            return Err(PrismError::DegeneratePruning { image: 'B', layer });
        }
        Ok(LayerOutput {
            a: SideState {
                features: cross_a,
                mask: mask_a,
            },
            b: SideState {
                features: cross_b,
                mask: mask_b,
            },
            scores_a,
            scores_b,
        })
    }
}

/// Final features plus the full per-layer history.
#[derive(Debug, Clone)]
pub struct MpmOutput {
    pub features_a: Tensor,
    pub features_b: Tensor,
    /// `masks_a[0]` is the all-ones initial mask; `masks_a[l]` follows layer `l`.
    pub masks_a: Vec<PatchMask>,
    pub masks_b: Vec<PatchMask>,
    /// `scores_a[l - 1]` is the estimator output of layer `l`.
    pub scores_a: Vec<Tensor>,
    pub scores_b: Vec<Tensor>,
}

impl MpmOutput {
    pub fn final_mask_a(&self) -> &PatchMask {
        self.masks_a.last().expect("history starts with M_0")
    }

    pub fn final_mask_b(&self) -> &PatchMask {
        self.masks_b.last().expect("history starts with M_0")
    }

    pub fn final_scores_a(&self) -> &Tensor {
        self.scores_a.last().expect("stack has at least one layer")
    }

    pub fn final_scores_b(&self) -> &Tensor {
        self.scores_b.last().expect("stack has at least one layer")
    }
}

pub struct MpmStack {
    layers: Vec<MpmLayer>,
    theta_p: f64,
}

impl MpmStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        theta_p: f64,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(PrismError::Config("mpm_layers must be at least 1".into()));
        }
        let layers = (0..layers)
            .map(|l| MpmLayer::new(store, &format!("{name}.layer{}", l + 1), dim, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, theta_p })
    }

    pub fn layers(&self) -> &[MpmLayer] {
        &self.layers
    }

    pub fn theta_p(&self) -> f64 {
        self.theta_p
    }

    pub fn set_theta_p(&mut self, theta_p: f64) {
        self.theta_p = theta_p;
    }

    /// Runs all layers from all-ones masks on coarse tokens `[N, C]`.
    pub fn forward(&self, f_a: &Tensor, f_b: &Tensor, grid_a: CoarseGrid, grid_b: CoarseGrid) -> Result<MpmOutput> {
        let dtype = f_a.dtype();
        let device = f_a.device().clone();
        let coords_a = grid_a.coords_tensor(dtype, &device)?;
        let coords_b = grid_b.coords_tensor(dtype, &device)?;
        let mut a = SideState {
            features: f_a.clone(),
            mask: PatchMask::ones(grid_a),
        };
        let mut b = SideState {
            features: f_b.clone(),
            mask: PatchMask::ones(grid_b),
        };
        let mut out = MpmOutput {
            features_a: f_a.clone(),
            features_b: f_b.clone(),
            masks_a: vec![a.mask.clone()],
            masks_b: vec![b.mask.clone()],
            scores_a: Vec::new(),
            scores_b: Vec::new(),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let step = layer.forward(&a, &b, grid_a, grid_b, &coords_a, &coords_b, self.theta_p, l + 1)?;
            out.masks_a.push(step.a.mask.clone());
            out.masks_b.push(step.b.mask.clone());
            out.scores_a.push(step.scores_a);
            out.scores_b.push(step.scores_b);
            a = step.a;
            b = step.b;
        }
        out.features_a = a.features;
        out.features_b = b.features;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_update_cases() {
        let g = CoarseGrid::new(1, 5);
        let prev = PatchMask::ones(g);
        let theta = 0.05;
        let m = update_mask(&[0.5, 0.2, 0.06, 0.05, 0.9], theta, &prev).unwrap();
        assert_eq!(m, prev);

        let m = update_mask(&[0.5, 0.2, 0.06, theta / 2.0, 0.9], theta, &prev).unwrap();
        assert!(!m.get(3));
        assert_eq!(m.count(), 4);

        let prev = PatchMask::from_vec(g, vec![true, false, true, true, true]).unwrap();
        let m = update_mask(&[0.99; 5], theta, &prev).unwrap();
        assert!(!m.get(1));

        assert!(update_mask(&[0.5; 4], theta, &prev).is_err());
    }
}
