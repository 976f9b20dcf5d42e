//! Residual convolutional encoder with top-down pyramid fusion.
//!
//! Three residual stages bring the image to 1/2, 1/4 and 1/8 resolution. The
//! 1/8 stage is projected to the coarse map; lateral 1x1 projections plus
//! upsample-and-add carry it back up to the 1/2 fine map.

use candle_core::Tensor;

use crate::error::{PrismError, Result};
use crate::image::ImageTensor;
use crate::nn::{Conv2d, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Channel widths of the 1/2, 1/4 and 1/8 stages.
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub c_coarse: usize,
    pub c_fine: usize,
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            widths: [16, 32, 64],
            blocks_per_stage: 2,
            c_coarse: 64,
            c_fine: 32,
        }
    }

    pub fn full() -> Self {
        Self {
            widths: [128, 196, 256],
            blocks_per_stage: 2,
            c_coarse: 256,
            c_fine: 128,
        }
    }
}

/// Coarse (1/8) and fine (1/2) maps for a batch of images, `[B, C, h, w]`.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub coarse: Tensor,
    pub fine: Tensor,
}

/// Stride-2 layers use an even kernel (4 with padding 1, or 2 with none) so
/// each output is centred on the 2x2 input block it replaces. An odd kernel
/// would centre it on the block's top-left pixel. The offset would compound to
/// 3.5 px at 1/8, misaligning coarse features from the cell centres.
fn downsampling_kernel(stride: usize, kernel: usize) -> usize {
    if stride == 2 {
        kernel + 1
    } else {
        kernel
    }
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let kernel = downsampling_kernel(stride, 3);
        let conv1 = Conv2d::new(
            store,
            &format!("{name}.conv1"),
            c_in,
            c_out,
            kernel,
            stride,
            1,
            true,
            2f64.sqrt(),
        )?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, true, 0.5)?;
        let shortcut = if stride != 1 || c_in != c_out {
            let kernel = downsampling_kernel(stride, 1);
            Some(Conv2d::new(
                store,
                &format!("{name}.shortcut"),
                c_in,
                c_out,
                kernel,
                stride,
                0,
                true,
                1.0,
            )?)
        } else {
            None
        };
        Ok(Self { conv1, conv2, shortcut })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv1.forward(x)?.relu()?;
        let y = self.conv2.forward(&y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + y)?.relu()?)
    }
}

pub struct Backbone {
    config: BackboneConfig,
    stem: Conv2d,
    stages: [Vec<ResBlock>; 3],
    coarse_out: Conv2d,
    lateral2: Conv2d,
    smooth2: Conv2d,
    lateral1: Conv2d,
    smooth1: Conv2d,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, config: &BackboneConfig) -> Result<Self> {
        let [w1, w2, w3] = config.widths;
        if config.blocks_per_stage == 0 {
            return Err(PrismError::Config("blocks_per_stage must be positive".into()));
        }
        let stem = Conv2d::new(store, &format!("{name}.stem"), 3, w1, 4, 2, 1, true, 2f64.sqrt())?;
        let mut make_stage = |idx: usize, c_in: usize, c_out: usize, stride: usize| -> Result<Vec<ResBlock>> {
            (0..config.blocks_per_stage)
                .map(|b| {
                    let (ci, s) = if b == 0 { (c_in, stride) } else { (c_out, 1) };
                    ResBlock::new(store, &format!("{name}.stage{idx}.block{b}"), ci, c_out, s)
                })
                .collect()
        };
        let stages = [
            make_stage(1, w1, w1, 1)?,
            make_stage(2, w1, w2, 2)?,
            make_stage(3, w2, w3, 2)?,
        ];
        let c_mid = w2;
        let coarse_out = Conv2d::new(
            store,
            &format!("{name}.coarse_out"),
            w3,
            config.c_coarse,
            1,
            1,
            0,
            true,
            1.0,
        )?;
        let lateral2 = Conv2d::new(
            store,
            &format!("{name}.lateral2"),
            w2,
            config.c_coarse,
            1,
            1,
            0,
            true,
            1.0,
        )?;
        let smooth2 = Conv2d::new(
            store,
            &format!("{name}.smooth2"),
            config.c_coarse,
            c_mid,
            3,
            1,
            1,
            true,
            1.0,
        )?;
        let lateral1 = Conv2d::new(store, &format!("{name}.lateral1"), w1, c_mid, 1, 1, 0, true, 1.0)?;
        let smooth1 = Conv2d::new(
            store,
            &format!("{name}.smooth1"),
            c_mid,
            config.c_fine,
            3,
            1,
            1,
            true,
            1.0,
        )?;
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            coarse_out,
            lateral2,
            smooth2,
            lateral1,
            smooth1,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Runs the encoder on a `[B, 3, H, W]` batch.
    pub fn forward(&self, images: &Tensor) -> Result<FeatureBundle> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(PrismError::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(PrismError::Shape(format!("image size {h}x{w} is not divisible by 32")));
        }
        let mut x = self.stem.forward(images)?.relu()?;
        let mut taps = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x)?;
            }
            taps.push(x.clone());
        }
        let coarse = self.coarse_out.forward(&taps[2])?;
        let up = coarse.upsample_nearest2d(h / 4, w / 4)?;
        let mid = (self.lateral2.forward(&taps[1])? + up)?.relu()?;
        let mid = self.smooth2.forward(&mid)?;
        let up = mid.upsample_nearest2d(h / 2, w / 2)?;
        let fine = (self.lateral1.forward(&taps[0])? + up)?.relu()?;
        let fine = self.smooth1.forward(&fine)?;
        Ok(FeatureBundle { coarse, fine })
    }

    /// Convenience wrapper for a single image.
    pub fn extract_features(&self, image: &ImageTensor, store: &ParamStore) -> Result<FeatureBundle> {
        image.check_divisible(32)?;
        let x = image.to_tensor(store.dtype(), store.device())?.unsqueeze(0)?;
        self.forward(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn shapes_follow_input_size() {
        let mut store = ParamStore::new(1, DType::F32);
        let cfg = BackboneConfig {
            widths: [8, 16, 32],
            blocks_per_stage: 1,
            c_coarse: 24,
            c_fine: 12,
        };
        let bb = Backbone::new(&mut store, "bb", &cfg).unwrap();
        let img = ImageTensor::zeros(64, 96);
        let f = bb.extract_features(&img, &store).unwrap();
        assert_eq!(f.coarse.dims(), &[1, 24, 8, 12]);
        assert_eq!(f.fine.dims(), &[1, 12, 32, 48]);
    }

    #[test]
    fn rejects_sizes_not_divisible_by_32() {
        let mut store = ParamStore::new(1, DType::F32);
        let bb = Backbone::new(&mut store, "bb", &BackboneConfig::toy()).unwrap();
        let err = bb.extract_features(&ImageTensor::zeros(48, 64), &store).unwrap_err();
        assert!(matches!(err, PrismError::Shape(_)));
    }
}
