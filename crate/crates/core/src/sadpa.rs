//! Scale-aware dynamic pruning attention.
//!
//! Queries come from the source tokens. Keys and values come from a 3-level
//! pyramid built on the target map with strided convolutions (ratios 4, 2, 1).
//! The coarsest level is never masked; the two finer levels are built from the
//! masked target map and carry the nearest-downsampled target mask, whose zero
//! entries are excluded from the softmax. The three messages and the source
//! features are fused by a residual FFN followed by layer normalization.
//! Pruned source tokens are passed through unchanged.

use candle_core::Tensor;

use crate::error::{PrismError, Result};
use crate::grid::{CoarseGrid, PatchMask};
use crate::nn::{softmax_last, Conv2d, LayerNorm, Linear, ParamStore};
use crate::rope::Rope;

pub const PYRAMID_RATIOS: [usize; 3] = [4, 2, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    SelfAttention,
    Cross,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SadpaConfig {
    pub dim: usize,
    pub heads: usize,
    pub mode: AttentionMode,
}

/// One level of the key/value pyramid.
#[derive(Debug, Clone)]
pub struct KvLevel {
    pub keys: Tensor,
    pub values: Tensor,
    pub mask: PatchMask,
    pub ratio: usize,
    /// Normalized pooled-cell centers, `[N_i, 2]`.
    pub coords: Tensor,
}

#[derive(Debug, Clone)]
pub struct SadpaOutput {
    pub features: Tensor,
    /// Per-level messages before fusion; zero for levels with no unmasked key.
    pub messages: [Tensor; 3],
    pub used_levels: [bool; 3],
}

pub struct Sadpa {
    config: SadpaConfig,
    q_proj: Linear,
    level_convs: Vec<Conv2d>,
    k_proj: Linear,
    v_proj: Linear,
    rope: Option<Rope>,
    ffn1: Linear,
    ffn2: Linear,
    norm: LayerNorm,
}

impl Sadpa {
    pub fn new(store: &mut ParamStore, name: &str, config: SadpaConfig) -> Result<Self> {
        let c = config.dim;
        if config.heads == 0 || c % config.heads != 0 {
            return Err(PrismError::Config(format!(
                "feature dimension {c} is not divisible by {} heads",
                config.heads
            )));
        }
        let q_proj = Linear::new(store, &format!("{name}.q_proj"), c, c, false)?;
        let level_convs = PYRAMID_RATIOS
            .iter()
            .enumerate()
            .map(|(i, &r)| Conv2d::new(store, &format!("{name}.level{}", i + 1), c, c, r, r, 0, true, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let k_proj = Linear::new(store, &format!("{name}.k_proj"), c, c, false)?;
        let v_proj = Linear::new(store, &format!("{name}.v_proj"), c, c, false)?;
        let rope = match config.mode {
            AttentionMode::SelfAttention => Some(Rope::new(store, &format!("{name}.rope"), c / config.heads)?),
            AttentionMode::Cross => None,
        };
        let ffn1 = Linear::with_gain(store, &format!("{name}.ffn1"), 4 * c, 2 * c, true, 2f64.sqrt())?;
        let ffn2 = Linear::new(store, &format!("{name}.ffn2"), 2 * c, c, true)?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), c)?;
        Ok(Self {
            config,
            q_proj,
            level_convs,
            k_proj,
            v_proj,
            rope,
            ffn1,
            ffn2,
            norm,
        })
    }

    pub fn config(&self) -> &SadpaConfig {
        &self.config
    }

    pub fn q_proj(&self) -> &Linear {
        &self.q_proj
    }

    pub fn k_proj(&self) -> &Linear {
        &self.k_proj
    }

    pub fn v_proj(&self) -> &Linear {
        &self.v_proj
    }

    pub fn level_conv(&self, level: usize) -> &Conv2d {
        &self.level_convs[level]
    }

    pub fn rope(&self) -> Option<&Rope> {
        self.rope.as_ref()
    }

    /// Builds the key/value pyramid from target tokens `[h*w, C]`.
    pub fn build_kv_pyramid(&self, f_t: &Tensor, grid: CoarseGrid, m_t: &PatchMask) -> Result<Vec<KvLevel>> {
        let (n, c) = f_t.dims2()?;
        if grid.rows % 4 != 0 || grid.cols % 4 != 0 {
            return Err(PrismError::Shape(format!(
                "coarse grid {}x{} is not divisible by 4",
                grid.rows, grid.cols
            )));
        }
        if n != grid.len() || m_t.grid() != grid {
            return Err(PrismError::Shape("target tokens, grid and mask disagree".into()));
        }
        let dtype = f_t.dtype();
        let device = f_t.device();
        let map = f_t.t()?.contiguous()?.reshape((1, c, grid.rows, grid.cols))?;
        let mask_map = m_t.to_tensor(dtype, device)?.reshape((1, 1, grid.rows, grid.cols))?;
        let masked_map = map.broadcast_mul(&mask_map)?;
        let mut levels = Vec::with_capacity(3);
        for (i, &ratio) in PYRAMID_RATIOS.iter().enumerate() {
            let source = if i == 0 { &map } else { &masked_map };
            let pooled = self.level_convs[i].forward(source)?;
            let (_, _, h, w) = pooled.dims4()?;
            let tokens = pooled.reshape((c, h * w))?.t()?.contiguous()?;
            let level_grid = CoarseGrid::new(h, w);
            let mask = if i == 0 {
                PatchMask::ones(level_grid)
            } else {
                m_t.downsample_nearest(ratio)?
            };
            let keep = mask.to_tensor(dtype, device)?;
            let keys = self.k_proj.forward(&tokens)?.broadcast_mul(&keep)?;
            let values = self.v_proj.forward(&tokens)?.broadcast_mul(&keep)?;
            levels.push(KvLevel {
                keys,
                values,
                mask,
                ratio,
                coords: level_grid.coords_tensor(dtype, device)?,
            });
        }
        Ok(levels)
    }

    /// Full SADPA update of the source tokens `f_s` (`[N_s, C]`) against the
    /// target tokens `f_t`. `coords` are the normalized source positions and are
    /// required in self mode.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        f_s: &Tensor,
        f_t: &Tensor,
        m_s: &PatchMask,
        m_t: &PatchMask,
        grid_s: CoarseGrid,
        grid_t: CoarseGrid,
        coords: Option<&Tensor>,
    ) -> Result<SadpaOutput> {
        let (n_s, c) = f_s.dims2()?;
        if c != self.config.dim || n_s != grid_s.len() || m_s.grid() != grid_s {
            return Err(PrismError::Shape("source tokens, grid and mask disagree".into()));
        }
        let dtype = f_s.dtype();
        let device = f_s.device();
        let q = self
            .q_proj
            .forward(f_s)?
            .broadcast_mul(&m_s.to_tensor(dtype, device)?)?;
        let levels = self.build_kv_pyramid(f_t, grid_t, m_t)?;
        let rope_ctx = match (&self.rope, self.config.mode) {
            (Some(rope), AttentionMode::SelfAttention) => {
                let qc =
                    coords.ok_or_else(|| PrismError::InvalidInput("self attention needs source coordinates".into()))?;
                Some((rope, qc))
            }
            _ => None,
        };
        let mut messages = Vec::with_capacity(3);
        let mut used = [false; 3];
        for (i, level) in levels.iter().enumerate() {
            let rope = rope_ctx.map(|(r, qc)| (r, qc, &level.coords));
            match attend(&q, &level.keys, &level.values, &level.mask, self.config.heads, rope) {
                Ok(m) => {
                    used[i] = true;
                    messages.push(m);
                }
                Err(PrismError::EmptyKeys) if i > 0 => {
                    messages.push(Tensor::zeros((n_s, c), dtype, device)?);
                }
                Err(e) => return Err(e),
            }
        }
        let fused_in = Tensor::cat(&[&messages[0], &messages[1], &messages[2], f_s], 1)?;
        let hidden = self.ffn1.forward(&fused_in)?.relu()?;
        let updated = self.norm.forward(&(f_s + self.ffn2.forward(&hidden)?)?)?;
        let keep = m_s.to_u8_tensor(device)?.broadcast_as((n_s, c))?;
        let features = keep.where_cond(&updated, f_s)?;
        let [m1, m2, m3]: [Tensor; 3] = messages
            .try_into()
            .map_err(|_| PrismError::Shape("expected three messages".into()))?;
        Ok(SadpaOutput {
            features,
            messages: [m1, m2, m3],
            used_levels: used,
        })
    }
}

/// Multi-head scaled dot-product attention of `q` (`[N_s, C]`) over one level.
/// Keys whose mask entry is zero get `-inf` logits. With `rope`, queries and
/// keys are rotated by `(rope, query_coords, key_coords)` before the product.
pub fn attend(
    q: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: &PatchMask,
    heads: usize,
    rope: Option<(&Rope, &Tensor, &Tensor)>,
) -> Result<Tensor> {
    let (n_s, c) = q.dims2()?;
    let (n_k, ck) = keys.dims2()?;
    if heads == 0 || c % heads != 0 || ck != c || values.dims2()? != (n_k, c) || mask.keep().len() != n_k {
        return Err(PrismError::Shape("attention operands disagree".into()));
    }
    if mask.all_zero() {
        return Err(PrismError::EmptyKeys);
    }
    let d = c / heads;
    let split =
        |t: &Tensor, n: usize| -> Result<Tensor> { Ok(t.reshape((n, heads, d))?.transpose(0, 1)?.contiguous()?) };
    let mut qh = split(q, n_s)?;
    let mut kh = split(keys, n_k)?;
    let vh = split(values, n_k)?;
    if let Some((rope, qc, kc)) = rope {
        qh = rope.rotate(&qh, qc)?;
        kh = rope.rotate(&kh, kc)?;
    }
    let logits = (qh.matmul(&kh.t()?)? * (1.0 / (d as f64).sqrt()))?;
    let bias = mask.to_logit_bias(q.dtype(), q.device())?;
    let logits = logits.broadcast_add(&bias)?;
    let attn = softmax_last(&logits)?;
    let out = attn.matmul(&vh)?;
    Ok(out.transpose(0, 1)?.contiguous()?.reshape((n_s, c))?)
}
