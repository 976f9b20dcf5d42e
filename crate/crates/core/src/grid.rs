//! Coordinate conventions shared by the model, supervision and evaluation.
//!
//! Image coordinates are continuous: pixel `(u, v)` covers `[u, u+1) x [v, v+1)`
//! and its center sits at `(u + 0.5, v + 0.5)`. A coarse cell `(r, c)` covers an
//! 8x8 pixel block and is represented by its center `(8c + 4, 8r + 4)`. Fine
//! maps are at 1/2 resolution, so fine pixel `u` is centered at `2u + 1`.

use candle_core::{DType, Device, Tensor};

use crate::error::{PrismError, Result};

/// Downsampling factor of the coarse feature map.
pub const COARSE_STRIDE: usize = 8;
/// Downsampling factor of the fine feature map.
pub const FINE_STRIDE: usize = 2;
/// Fine pixels per coarse cell along each axis.
pub const FINE_PER_COARSE: usize = COARSE_STRIDE / FINE_STRIDE;

/// Row-major grid of coarse patches for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoarseGrid {
    pub rows: usize,
    pub cols: usize,
}

impl CoarseGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    /// Grid for an image of `height x width` pixels.
    pub fn for_image(height: usize, width: usize) -> Self {
        Self::new(height / COARSE_STRIDE, width / COARSE_STRIDE)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Cell center in image pixel coordinates.
    pub fn center(&self, index: usize) -> [f64; 2] {
        let (r, c) = self.row_col(index);
        let s = COARSE_STRIDE as f64;
        [c as f64 * s + s / 2.0, r as f64 * s + s / 2.0]
    }

    /// Cell containing the image point, if the point lies inside the image.
    pub fn cell_at(&self, p: [f64; 2]) -> Option<usize> {
        let s = COARSE_STRIDE as f64;
        let (w, h) = (self.cols as f64 * s, self.rows as f64 * s);
        if !(p[0] >= 0.0 && p[0] < w && p[1] >= 0.0 && p[1] < h) {
            return None;
        }
        let c = ((p[0] / s).floor() as usize).min(self.cols - 1);
        let r = ((p[1] / s).floor() as usize).min(self.rows - 1);
        Some(self.index(r, c))
    }

    /// Fine-map pixel used as the refinement anchor of a coarse cell, as `(x, y)`.
    pub fn fine_anchor(&self, index: usize) -> (usize, usize) {
        let (r, c) = self.row_col(index);
        let half = FINE_PER_COARSE / 2;
        (c * FINE_PER_COARSE + half, r * FINE_PER_COARSE + half)
    }

    /// Image coordinates of the refinement anchor of a coarse cell.
    pub fn anchor_point(&self, index: usize) -> [f64; 2] {
        let (x, y) = self.fine_anchor(index);
        [fine_to_image(x as f64), fine_to_image(y as f64)]
    }

    /// Normalized cell-center coordinates in `[0, 1]^2`, one `(x, y)` row per cell.
    pub fn normalized_centers(&self) -> Vec<[f64; 2]> {
        (0..self.len())
            .map(|i| {
                let (r, c) = self.row_col(i);
                [(c as f64 + 0.5) / self.cols as f64, (r as f64 + 0.5) / self.rows as f64]
            })
            .collect()
    }

    pub fn coords_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f64> = self.normalized_centers().into_iter().flatten().collect();
        Ok(Tensor::from_vec(flat, (self.len(), 2), device)?.to_dtype(dtype)?)
    }
}

/// Converts a (possibly fractional) fine-map pixel index to image coordinates.
pub fn fine_to_image(u: f64) -> f64 {
    FINE_STRIDE as f64 * u + FINE_STRIDE as f64 / 2.0
}

/// Inverse of [`fine_to_image`].
pub fn image_to_fine(x: f64) -> f64 {
    (x - FINE_STRIDE as f64 / 2.0) / FINE_STRIDE as f64
}

/// Binary keep/prune mask over a coarse grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    grid: CoarseGrid,
    keep: Vec<bool>,
}

impl PatchMask {
    pub fn ones(grid: CoarseGrid) -> Self {
        Self {
            grid,
            keep: vec![true; grid.len()],
        }
    }

    pub fn from_vec(grid: CoarseGrid, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != grid.len() {
            return Err(PrismError::Shape(format!(
                "mask has {} entries, grid {}x{} needs {}",
                keep.len(),
                grid.rows,
                grid.cols,
                grid.len()
            )));
        }
        Ok(Self { grid, keep })
    }

    pub fn grid(&self) -> CoarseGrid {
        self.grid
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn get(&self, index: usize) -> bool {
        self.keep[index]
    }

    pub fn at(&self, row: usize, col: usize) -> bool {
        self.keep[self.grid.index(row, col)]
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn all_zero(&self) -> bool {
        !self.keep.iter().any(|&k| k)
    }

    /// True when every kept entry of `self` is also kept in `other`.
    pub fn is_subset_of(&self, other: &PatchMask) -> bool {
        self.keep.len() == other.keep.len() && self.keep.iter().zip(&other.keep).all(|(&a, &b)| !a || b)
    }

    /// Nearest-neighbor downsampling by an integer ratio: output cell `(y, x)`
    /// takes the value at `(ratio * y, ratio * x)`.
    pub fn downsample_nearest(&self, ratio: usize) -> Result<PatchMask> {
        if ratio == 0 || self.grid.rows % ratio != 0 || self.grid.cols % ratio != 0 {
            return Err(PrismError::Shape(format!(
                "mask grid {}x{} is not divisible by {ratio}",
                self.grid.rows, self.grid.cols
            )));
        }
        let grid = CoarseGrid::new(self.grid.rows / ratio, self.grid.cols / ratio);
        let keep = (0..grid.len())
            .map(|i| {
                let (r, c) = grid.row_col(i);
                self.at(r * ratio, c * ratio)
            })
            .collect();
        Ok(PatchMask { grid, keep })
    }

    /// `[N, 1]` tensor of 0/1 values.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(v, (self.keep.len(), 1), device)?.to_dtype(dtype)?)
    }

    /// `[N, 1]` u8 tensor for `where_cond`.
    pub fn to_u8_tensor(&self, device: &Device) -> Result<Tensor> {
        let v: Vec<u8> = self.keep.iter().map(|&k| k as u8).collect();
        Ok(Tensor::from_vec(v, (self.keep.len(), 1), device)?)
    }

    /// `[N]` additive logit bias: 0 where kept, `-inf` where pruned.
    pub fn to_logit_bias(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self
            .keep
            .iter()
            .map(|&k| if k { 0.0 } else { f32::NEG_INFINITY })
            .collect();
        Ok(Tensor::from_vec(v, self.keep.len(), device)?.to_dtype(dtype)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_lookup_matches_centers() {
        let g = CoarseGrid::new(4, 6);
        for i in 0..g.len() {
            assert_eq!(g.cell_at(g.center(i)), Some(i));
        }
        assert_eq!(g.cell_at([-0.1, 3.0]), None);
        assert_eq!(g.cell_at([48.0, 3.0]), None);
    }

    #[test]
    fn anchor_lies_inside_its_cell() {
        let g = CoarseGrid::new(3, 3);
        for i in 0..g.len() {
            assert_eq!(g.cell_at(g.anchor_point(i)), Some(i));
        }
        assert_eq!(g.anchor_point(0), [5.0, 5.0]);
    }

    #[test]
    fn nearest_downsample_by_hand() {
        let g = CoarseGrid::new(4, 4);
        let mut keep = vec![true; 16];
        keep[0] = false;
        let m = PatchMask::from_vec(g, keep).unwrap();
        let d = m.downsample_nearest(2).unwrap();
        assert_eq!(d.keep(), &[false, true, true, true]);
        // (1,1) is not a sample position for ratio 2, so pruning it leaves level 2 intact.
        let mut keep = vec![true; 16];
        keep[5] = false;
        let m = PatchMask::from_vec(g, keep).unwrap();
        assert_eq!(m.downsample_nearest(2).unwrap().count(), 4);
        assert!(m.downsample_nearest(3).is_err());
    }
}
