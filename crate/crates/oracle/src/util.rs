use candle_core::{DType, Device, Tensor};
use prism_core::grid::{CoarseGrid, PatchMask};
use prism_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::reference::Mat;

pub fn tensor(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Rows of `t` as `f64`.
pub fn rows(t: &Tensor) -> Result<Mat> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn random_mask(rng: &mut ChaCha8Rng, grid: CoarseGrid, prune: f64) -> Result<PatchMask> {
    let keep = (0..grid.len()).map(|_| !rng.random_bool(prune)).collect();
    PatchMask::from_vec(grid, keep)
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Bitwise equality of two tensors of the same dtype.
pub fn bitwise_equal(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.dims() != b.dims() || a.dtype() != b.dtype() {
        return Ok(false);
    }
    let x = flat(a)?;
    let y = flat(b)?;
    Ok(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()))
}
