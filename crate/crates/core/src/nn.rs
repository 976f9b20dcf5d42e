//! Parameter storage and the handful of layers the model is built from.
//!
//! Parameters live in a name-ordered store so that initialization order,
//! optimizer order and checkpoint order all agree. Initialization draws from
//! a seeded ChaCha stream, which makes model construction reproducible.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PrismError, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone)]
pub enum Init {
    /// Uniform in `[-gain * sqrt(3 / fan_in), +gain * sqrt(3 / fan_in)]`.
    Kaiming {
        fan_in: usize,
        gain: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    Const(f64),
    Values(Vec<f64>),
}

/// Named, seeded parameter store.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates the parameter `name` with the given shape. Names must be unique.
    pub fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(PrismError::InvalidInput(format!("parameter `{name}` created twice")));
        }
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Kaiming { fan_in, gain } => {
                let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                (0..numel).map(|_| self.rng.random_range(-bound..=bound)).collect()
            }
            Init::Uniform { lo, hi } => (0..numel).map(|_| self.rng.random_range(lo..=hi)).collect(),
            Init::Const(c) => vec![c; numel],
            Init::Values(v) => {
                if v.len() != numel {
                    return Err(PrismError::Shape(format!(
                        "init values for `{name}` have {} entries, shape needs {numel}",
                        v.len()
                    )));
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

/// Affine map on the last dimension of a `[N, in]` tensor.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::with_gain(store, name, d_in, d_out, bias, 1.0)
    }

    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let weight = store.create(
            &format!("{name}.weight"),
            &[d_out, d_in],
            Init::Kaiming { fan_in: d_in, gain },
        )?;
        let bias = if bias {
            Some(store.create(&format!("{name}.bias"), &[d_out], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// 2-D convolution over `[B, C, H, W]` with square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.create(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::Kaiming { fan_in, gain },
        )?;
        let bias = if bias {
            Some(store.create(&format!("{name}.bias"), &[c_out], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[3]
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, _, _) = x.dims4()?;
        let c_out = self.weight.dim(0)?;
        let (cols, ho, wo) = im2col(x, self.kernel(), self.stride, self.padding)?;
        let w = self.weight.reshape((c_out, ()))?;
        let y = w.broadcast_matmul(&cols)?.reshape((b, c_out, ho, wo))?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

/// Every `stride`-th entry of dimension `dim`, starting at `start`, `count` entries.
fn strided(x: &Tensor, dim: usize, start: usize, count: usize, stride: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.narrow(dim, start, count)?);
    }
    let len = x.dim(dim)?;
    // Pad with zeros so the reshape below always has whole groups.
    let needed = start + count * stride;
    let x = if needed > len {
        x.pad_with_zeros(dim, 0, needed - len)?
    } else {
        x.clone()
    };
    let x = x.narrow(dim, start, count * stride)?;
    let mut shape = x.dims().to_vec();
    shape[dim] = count;
    shape.insert(dim + 1, stride);
    Ok(x.reshape(shape)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?)
}

/// Unfolds `[B, C, H, W]` into columns `[B, C*k*k, Ho*Wo]` ordered `(c, ky, kx)`,
/// which matches a `[C_out, C, k, k]` weight flattened row-major. Built from
/// views and copies only, so gradients flow through plain matrix products.
pub fn im2col(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<(Tensor, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if hp < kernel || wp < kernel || stride == 0 {
        return Err(PrismError::Shape(format!(
            "cannot apply a {kernel}x{kernel} kernel to {h}x{w}"
        )));
    }
    let ho = (hp - kernel) / stride + 1;
    let wo = (wp - kernel) / stride + 1;
    if kernel == stride && padding == 0 && h % kernel == 0 && w % kernel == 0 {
        // Non-overlapping patches: a pure reshape.
        let cols = x
            .reshape((b, c, ho, kernel, wo, kernel))?
            .permute((0, 1, 3, 5, 2, 4))?
            .reshape((b, c * kernel * kernel, ho * wo))?;
        return Ok((cols, ho, wo));
    }
    let xp = if padding > 0 {
        x.pad_with_zeros(2, padding, padding)?
            .pad_with_zeros(3, padding, padding)?
    } else {
        x.clone()
    };
    let mut taps = Vec::with_capacity(kernel * kernel);
    for ky in 0..kernel {
        let rows = strided(&xp, 2, ky, ho, stride)?;
        for kx in 0..kernel {
            taps.push(strided(&rows, 3, kx, wo, stride)?);
        }
    }
    let cols = Tensor::stack(&taps, 2)?.reshape((b, c * kernel * kernel, ho * wo))?;
    Ok((cols, ho, wo))
}

/// Layer normalization over the last dimension with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.create(&format!("{name}.gain"), &[dim], Init::Const(1.0))?,
            bias: store.create(&format!("{name}.bias"), &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

/// Numerically stable softmax over the last dimension. Entries equal to
/// `-inf` receive exactly zero probability.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Reads a rank-1 tensor as `f64` values.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_conv_matches_direct_conv() {
        let mut store = ParamStore::new(1, DType::F64);
        let x = store
            .create("x", &[2, 3, 12, 16], Init::Uniform { lo: -1.0, hi: 1.0 })
            .unwrap();
        for (i, &(k, s, p)) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 4, 0), (2, 2, 0), (3, 1, 0)]
            .iter()
            .enumerate()
        {
            let conv = Conv2d::new(&mut store, &format!("c{i}"), 3, 5, k, s, p, true, 1.0).unwrap();
            let ours = conv.forward(&x).unwrap();
            let reference = x
                .conv2d(conv.weight(), p, s, 1, 1)
                .unwrap()
                .broadcast_add(&conv.bias().unwrap().reshape((1, 5, 1, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), reference.dims(), "k={k} s={s} p={p}");
            let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-12, "k={k} s={s} p={p}");
        }
    }
}
