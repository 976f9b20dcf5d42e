//! The full matcher: backbone, pruning stack, weighted dual softmax and
//! refinement, plus loss evaluation against ground truth.

use candle_core::{DType, Tensor, D};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{PrismError, Result};
use crate::grid::{image_to_fine, CoarseGrid};
use crate::image::ImageTensor;
use crate::matcher::{self, MatchSet, ScoreMatrix};
use crate::mpm::{MpmOutput, MpmStack};
use crate::nn::{to_vec_f64, ParamStore};
use crate::supervision::{self, LossBundle, LossWarnings, LossWeights, SupervisionLabels};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    pub backbone: BackboneConfig,
    pub mpm_layers: usize,
    pub heads: usize,
    pub theta_p: f64,
    pub theta_c: f64,
    pub tau: f64,
    pub refine_window: usize,
    /// Stop gradients through the relevance weights of the assignment matrix.
    pub detach_sigma: bool,
    pub grayscale: bool,
    pub loss_weights: LossWeights,
    /// Lower bound (image pixels) on the refinement spread `phi` weighting the fine loss.
    pub min_phi: f64,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            preset: Preset::Toy,
            backbone: BackboneConfig::toy(),
            mpm_layers: 2,
            heads: 4,
            theta_p: crate::mpm::DEFAULT_THETA_P,
            theta_c: matcher::DEFAULT_THETA_C,
            tau: matcher::DEFAULT_TAU,
            refine_window: matcher::DEFAULT_WINDOW,
            detach_sigma: false,
            grayscale: false,
            loss_weights: LossWeights::default(),
            min_phi: 1.0,
        }
    }

    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            backbone: BackboneConfig::full(),
            mpm_layers: 4,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.backbone.c_coarse;
        if self.heads == 0 || c % self.heads != 0 || (c / self.heads) % 2 != 0 {
            return Err(PrismError::Config(format!(
                "c_coarse={c} must split into {} heads of even width",
                self.heads
            )));
        }
        if !(self.theta_p >= 0.0 && self.theta_p < 1.0) {
            return Err(PrismError::Config(format!(
                "theta_p={} must lie in [0, 1)",
                self.theta_p
            )));
        }
        if !(self.theta_c >= 0.0 && self.theta_c < 1.0) {
            return Err(PrismError::Config(format!(
                "theta_c={} must lie in [0, 1)",
                self.theta_c
            )));
        }
        if !(self.tau > 0.0) {
            return Err(PrismError::Config("tau must be positive".into()));
        }
        if self.refine_window % 2 == 0 {
            return Err(PrismError::Config("refine_window must be odd".into()));
        }
        if self.mpm_layers == 0 {
            return Err(PrismError::Config("mpm_layers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything the forward pass produces for one pair.
#[derive(Debug, Clone)]
pub struct PairForward {
    pub grid_a: CoarseGrid,
    pub grid_b: CoarseGrid,
    /// `[C_f, H/2, W/2]`.
    pub fine_a: Tensor,
    pub fine_b: Tensor,
    pub mpm: MpmOutput,
    /// Assignment matrix `[N_A, N_B]`.
    pub assignment: Tensor,
}

pub struct PrismModel {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    mpm: MpmStack,
}

fn to_tokens(map: &Tensor) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    Ok(map.reshape((c, h * w))?.t()?.contiguous()?)
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

impl PrismModel {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let backbone = Backbone::new(&mut store, "backbone", &config.backbone)?;
        let mpm = MpmStack::new(
            &mut store,
            "mpm",
            config.mpm_layers,
            config.backbone.c_coarse,
            config.heads,
            config.theta_p,
        )?;
        Ok(Self {
            config,
            store,
            backbone,
            mpm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn mpm(&self) -> &MpmStack {
        &self.mpm
    }

    pub fn set_theta_p(&mut self, theta_p: f64) {
        self.config.theta_p = theta_p;
        self.mpm.set_theta_p(theta_p);
    }

    pub fn set_theta_c(&mut self, theta_c: f64) {
        self.config.theta_c = theta_c;
    }

    pub fn image_tensor(&self, image: &ImageTensor) -> Result<Tensor> {
        image.check_divisible(32)?;
        let image = if self.config.grayscale {
            image.to_grayscale()
        } else {
            image.clone()
        };
        image.to_tensor(self.store.dtype(), self.store.device())
    }

    /// Forward pass on `[3, H, W]` tensors.
    pub fn forward(&self, a: &Tensor, b: &Tensor) -> Result<PairForward> {
        let (_, ha, wa) = a.dims3()?;
        let (_, hb, wb) = b.dims3()?;
        let (fa, fb) = if (ha, wa) == (hb, wb) {
            let batch = Tensor::stack(&[a, b], 0)?;
            let f = self.backbone.forward(&batch)?;
            ((f.coarse.get(0)?, f.fine.get(0)?), (f.coarse.get(1)?, f.fine.get(1)?))
        } else {
            let f1 = self.backbone.forward(&a.unsqueeze(0)?)?;
            let f2 = self.backbone.forward(&b.unsqueeze(0)?)?;
            (
                (f1.coarse.get(0)?, f1.fine.get(0)?),
                (f2.coarse.get(0)?, f2.fine.get(0)?),
            )
        };
        let grid_a = CoarseGrid::for_image(ha, wa);
        let grid_b = CoarseGrid::for_image(hb, wb);
        let mpm = self
            .mpm
            .forward(&to_tokens(&fa.0)?, &to_tokens(&fb.0)?, grid_a, grid_b)?;
        let assignment = self.assignment(&mpm)?;
        Ok(PairForward {
            grid_a,
            grid_b,
            fine_a: fa.1,
            fine_b: fb.1,
            mpm,
            assignment,
        })
    }

    fn assignment(&self, mpm: &MpmOutput) -> Result<Tensor> {
        let s = matcher::similarity(
            &l2_normalize(&mpm.features_a)?,
            &l2_normalize(&mpm.features_b)?,
            1.0 / self.config.tau,
        )?;
        let (sa, sb) = if self.config.detach_sigma {
            (mpm.final_scores_a().detach(), mpm.final_scores_b().detach())
        } else {
            (mpm.final_scores_a().clone(), mpm.final_scores_b().clone())
        };
        matcher::weighted_dual_softmax(&s, &sa, &sb)
    }

    /// Coarse selection and refinement from a finished forward pass.
    pub fn matches_from(&self, fwd: &PairForward) -> Result<MatchSet> {
        let p = ScoreMatrix::from_tensor(&fwd.assignment)?;
        let coarse = matcher::select_coarse(&p, self.config.theta_c, fwd.mpm.final_mask_a(), fwd.mpm.final_mask_b())?;
        matcher::refine(
            &coarse,
            fwd.grid_a,
            fwd.grid_b,
            &fwd.fine_a,
            &fwd.fine_b,
            self.config.refine_window,
        )
    }

    pub fn match_images(&self, a: &ImageTensor, b: &ImageTensor) -> Result<(MatchSet, PairForward)> {
        let fwd = self.forward(&self.image_tensor(a)?, &self.image_tensor(b)?)?;
        Ok((self.matches_from(&fwd)?, fwd))
    }

    /// Total loss tensor and its scalar breakdown. The fine loss is evaluated
    /// on the ground-truth coarse matches.
    pub fn losses(&self, fwd: &PairForward, labels: &SupervisionLabels) -> Result<(Tensor, LossBundle)> {
        let mut warnings = LossWarnings::default();
        let l_c = supervision::coarse_loss(&fwd.assignment, &labels.matches, &mut warnings)?;

        // Only targets the window can express are supervised.
        let radius = (self.config.refine_window / 2) as f64;
        let reachable = |j: usize, t: [f64; 2]| {
            let (ax, ay) = fwd.grid_b.fine_anchor(j);
            let dx = image_to_fine(t[0]) - ax as f64;
            let dy = image_to_fine(t[1]) - ay as f64;
            dx.abs().max(dy.abs()) <= radius
        };
        let supervised: Vec<((usize, usize), [f64; 2])> = labels
            .matches
            .iter()
            .zip(&labels.fine_targets)
            .filter_map(|(&(i, j), t)| t.filter(|&t| reachable(j, t)).map(|t| ((i, j), t)))
            .collect();
        let pairs: Vec<(usize, usize)> = supervised.iter().map(|&(pair, _)| pair).collect();
        let refined = matcher::refine_pairs(
            &pairs,
            fwd.grid_a,
            fwd.grid_b,
            &fwd.fine_a,
            &fwd.fine_b,
            self.config.refine_window,
        )?;
        let targets: Vec<f64> = refined.kept.iter().flat_map(|&k| supervised[k].1).collect();
        let n = refined.kept.len();
        let dtype = fwd.assignment.dtype();
        let device = fwd.assignment.device();
        let targets = Tensor::from_vec(targets, (n, 2), device)?.to_dtype(dtype)?;
        // The heatmap variance is phi^2.
        let phi = refined.variance.sqrt()?.clamp(self.config.min_phi, f64::INFINITY)?;
        let l_f = supervision::fine_loss(&refined.points_b, &targets, &phi, &mut warnings)?;

        let l_p = supervision::pruning_loss(
            &fwd.mpm.scores_a,
            &fwd.mpm.scores_b,
            &labels.matchable_a,
            &labels.matchable_b,
            &mut warnings,
        )?;
        let total = supervision::total_loss(&l_c, &l_f, &l_p, self.config.loss_weights)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let bundle = LossBundle {
            coarse: scalar(&l_c)?,
            fine: scalar(&l_f)?,
            pruning: scalar(&l_p)?,
            total: scalar(&total)?,
            phi: to_vec_f64(&phi)?,
            warnings,
        };
        Ok((total, bundle))
    }
}
