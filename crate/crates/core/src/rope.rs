//! Two-dimensional rotary position embedding with learned frequencies.
//!
//! Each feature vector is split into `d/2` planes; plane `k` is rotated by
//! `-theta_k` with `theta_k = b_k . (x, y)`. Rotating queries and keys by their
//! own positions this way turns the dot product into `q^T R(p - s) k`, where
//! `R` is the block-diagonal rotation built from `b_k . (p - s)`.

use candle_core::{Tensor, D};

use crate::error::{PrismError, Result};
use crate::nn::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Rope {
    /// `[d/2, 2]` projection rows `b_k`.
    freqs: Tensor,
    head_dim: usize,
}

/// Initial frequency rows: magnitudes log-spaced in `[1, max_freq]`, planes
/// alternating between the x and y axes.
pub fn initial_frequencies(head_dim: usize, max_freq: f64) -> Vec<[f64; 2]> {
    let planes = head_dim / 2;
    let levels = planes.div_ceil(2).max(1);
    (0..planes)
        .map(|k| {
            let level = k / 2;
            let t = if levels > 1 {
                level as f64 / (levels - 1) as f64
            } else {
                0.0
            };
            let mag = max_freq.powf(t);
            if k % 2 == 0 {
                [mag, 0.0]
            } else {
                [0.0, mag]
            }
        })
        .collect()
}

impl Rope {
    pub fn new(store: &mut ParamStore, name: &str, head_dim: usize) -> Result<Self> {
        if head_dim % 2 != 0 || head_dim == 0 {
            return Err(PrismError::Shape(format!(
                "rope head dimension {head_dim} must be even"
            )));
        }
        let init: Vec<f64> = initial_frequencies(head_dim, 32.0).into_iter().flatten().collect();
        let freqs = store.create(&format!("{name}.freqs"), &[head_dim / 2, 2], Init::Values(init))?;
        Ok(Self { freqs, head_dim })
    }

    pub fn from_tensor(freqs: Tensor) -> Result<Self> {
        let (planes, two) = freqs.dims2()?;
        if two != 2 {
            return Err(PrismError::Shape("rope frequencies must be [d/2, 2]".into()));
        }
        Ok(Self {
            freqs,
            head_dim: planes * 2,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn freqs(&self) -> &Tensor {
        &self.freqs
    }

    /// Rotates `x` (`[..., N, d]`) by the positions `coords` (`[N, 2]`).
    pub fn rotate(&self, x: &Tensor, coords: &Tensor) -> Result<Tensor> {
        rotate(x, coords, &self.freqs)
    }
}

/// Rotates every row of `x` (`[..., N, d]`) by its own position.
pub fn rotate(x: &Tensor, coords: &Tensor, freqs: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let d = *dims
        .last()
        .ok_or_else(|| PrismError::Shape("rope input must have rank >= 1".into()))?;
    if d % 2 != 0 {
        return Err(PrismError::Shape(format!("rope feature dimension {d} must be even")));
    }
    let (n, _) = coords.dims2()?;
    let (planes, _) = freqs.dims2()?;
    if planes * 2 != d {
        return Err(PrismError::Shape(format!(
            "rope has {planes} planes but features have dimension {d}"
        )));
    }
    if dims.len() < 2 || dims[dims.len() - 2] != n {
        return Err(PrismError::Shape("rope coordinates and features disagree on N".into()));
    }
    // [N, d/2]
    let angles = coords.matmul(&freqs.t()?)?;
    let cos = angles.cos()?;
    let sin = angles.sin()?;
    let mut split = dims[..dims.len() - 1].to_vec();
    split.push(planes);
    split.push(2);
    let pairs = x.reshape(split.as_slice())?;
    let x0 = pairs.narrow(D::Minus1, 0, 1)?.squeeze(D::Minus1)?;
    let x1 = pairs.narrow(D::Minus1, 1, 1)?.squeeze(D::Minus1)?;
    let y0 = (x0.broadcast_mul(&cos)? + x1.broadcast_mul(&sin)?)?;
    let y1 = (x1.broadcast_mul(&cos)? - x0.broadcast_mul(&sin)?)?;
    let rank = y0.rank();
    let out = Tensor::stack(&[y0, y1], rank)?;
    Ok(out.reshape(dims.as_slice())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn zero_coords_is_identity() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (5, 8), &dev).unwrap();
        let coords = Tensor::zeros((5, 2), DType::F64, &dev).unwrap();
        let freqs = Tensor::randn(0f64, 3.0, (4, 2), &dev).unwrap();
        let y = rotate(&x, &coords, &freqs).unwrap();
        let diff = (y - &x)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn odd_dimension_rejected() {
        let mut store = ParamStore::new(0, DType::F64);
        assert!(Rope::new(&mut store, "r", 5).is_err());
        let dev = Device::Cpu;
        let x = Tensor::zeros((2, 3), DType::F64, &dev).unwrap();
        let c = Tensor::zeros((2, 2), DType::F64, &dev).unwrap();
        let f = Tensor::zeros((1, 2), DType::F64, &dev).unwrap();
        assert!(rotate(&x, &c, &f).is_err());
    }

    #[test]
    fn initial_frequencies_alternate_axes() {
        let f = initial_frequencies(8, 32.0);
        assert_eq!(f.len(), 4);
        assert_eq!(f[0], [1.0, 0.0]);
        assert_eq!(f[1], [0.0, 1.0]);
        assert_eq!(f[2], [32.0, 0.0]);
        assert_eq!(f[3], [0.0, 32.0]);
    }
}
