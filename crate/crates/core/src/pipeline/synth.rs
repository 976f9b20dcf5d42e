//! Synthetic homography pairs built from procedural textures or user images.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PrismError, Result};
use crate::image::ImageTensor;
use crate::pipeline::config::RunConfig;
use crate::pipeline::dataset::DatasetEntry;
use crate::supervision::GroundTruthGeometry;

/// Sampled homographies with a condition number above this are redrawn.
pub const MAX_CONDITION: f64 = 1e8;
const MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyBounds {
    /// Maximum absolute in-plane rotation, degrees.
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum translation as a fraction of the image side.
    pub translation: f64,
    /// Maximum perspective coefficient in image-normalized units.
    pub perspective: f64,
}

impl HomographyBounds {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            translation: 0.0,
            perspective: 0.0,
        }
    }

    /// Moderate viewpoint changes used for training.
    pub fn moderate() -> Self {
        Self {
            rotation_deg: 15.0,
            scale_min: 0.85,
            scale_max: 1.2,
            translation: 0.1,
            perspective: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(PrismError::Config(format!(
                "scale bounds [{}, {}] must satisfy 0 < min <= max",
                self.scale_min, self.scale_max
            )));
        }
        let others = [self.rotation_deg, self.translation, self.perspective];
        if others.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(PrismError::Config(
                "homography bounds must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricBounds {
    /// Maximum additive brightness offset.
    pub brightness: f64,
    /// Maximum relative contrast change.
    pub contrast: f64,
}

impl PhotometricBounds {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn moderate() -> Self {
        Self {
            brightness: 0.1,
            contrast: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseImage {
    Procedural,
    /// Resized to the requested size before warping.
    Image(ImageTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPairSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub base: BaseImage,
    pub homography: HomographyBounds,
    pub photometric: PhotometricBounds,
}

impl SyntheticPairSpec {
    pub fn procedural(seed: u64, height: usize, width: usize) -> Self {
        Self {
            seed,
            height,
            width,
            base: BaseImage::Procedural,
            homography: HomographyBounds::moderate(),
            photometric: PhotometricBounds::moderate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub name: String,
    pub a: ImageTensor,
    pub b: ImageTensor,
}

/// A generated pair together with the pixels of B that came from inside A.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub pair: ImagePair,
    pub geometry: GroundTruthGeometry,
    pub homography: Matrix3<f64>,
    /// Row-major `H x W`; false where B was filled with zeros.
    pub valid_b: Vec<bool>,
}

/// Bilinear upsampling of a coarse random lattice, one octave of value noise.
fn value_noise(rng: &mut ChaCha8Rng, height: usize, width: usize, cell: usize) -> Vec<f32> {
    let gh = height / cell + 2;
    let gw = width / cell + 2;
    let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random::<f32>()).collect();
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let fy = y as f32 / cell as f32;
        let y0 = fy.floor() as usize;
        let ty = fy - y0 as f32;
        let ty = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..width {
            let fx = x as f32 / cell as f32;
            let x0 = fx.floor() as usize;
            let tx = fx - x0 as f32;
            let tx = tx * tx * (3.0 - 2.0 * tx);
            let l = |r: usize, c: usize| lattice[r * gw + c];
            let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
            let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
            out[y * width + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Colored multi-octave noise overlaid with a few checkerboard and flat
/// rectangles. Every 8x8 patch ends up with distinctive local structure.
pub fn procedural_texture(rng: &mut ChaCha8Rng, height: usize, width: usize) -> ImageTensor {
    let mut img = ImageTensor::zeros(height, width);
    let octaves = [(32usize, 0.3f32), (16, 0.25), (8, 0.25), (4, 0.2)];
    for c in 0..3 {
        let mut plane = vec![0.0f32; height * width];
        for &(cell, weight) in &octaves {
            for (p, n) in plane.iter_mut().zip(value_noise(rng, height, width, cell)) {
                *p += weight * n;
            }
        }
        for y in 0..height {
            for x in 0..width {
                img.set(c, y, x, plane[y * width + x]);
            }
        }
    }
    let shapes = 3 + (height * width) / 4096;
    for _ in 0..shapes {
        let rw = rng.random_range(6..=(width / 3).max(7));
        let rh = rng.random_range(6..=(height / 3).max(7));
        let x0 = rng.random_range(0..width.saturating_sub(rw).max(1));
        let y0 = rng.random_range(0..height.saturating_sub(rh).max(1));
        let color_a: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let color_b: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let checker = rng.random_range(2..=6usize);
        let flat = rng.random_bool(0.3);
        for y in y0..(y0 + rh).min(height) {
            for x in x0..(x0 + rw).min(width) {
                let odd = ((x - x0) / checker + (y - y0) / checker) % 2 == 1;
                let color = if flat || !odd { color_a } else { color_b };
                for (c, v) in color.iter().enumerate() {
                    img.set(c, y, x, *v);
                }
            }
        }
    }
    img
}

fn translation(tx: f64, ty: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0)
}

fn symmetric(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.random_range(-r..=r)
    } else {
        0.0
    }
}

pub fn condition_number(h: &Matrix3<f64>) -> f64 {
    let sv = h.singular_values();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        sv.max() / min
    }
}

/// Draws `T(c + t) R S P T(-c)` about the image center `c`. All-zero bounds
/// produce the identity exactly.
pub fn sample_homography(
    rng: &mut ChaCha8Rng,
    bounds: &HomographyBounds,
    height: usize,
    width: usize,
) -> Result<Matrix3<f64>> {
    bounds.validate()?;
    let (w, h) = (width as f64, height as f64);
    for _ in 0..MAX_RETRIES {
        let angle = symmetric(rng, bounds.rotation_deg).to_radians();
        let tx = symmetric(rng, bounds.translation) * w;
        let ty = symmetric(rng, bounds.translation) * h;
        let px = symmetric(rng, bounds.perspective) / w;
        let py = symmetric(rng, bounds.perspective) / h;
        let scale = if bounds.scale_max > bounds.scale_min {
            // Log-uniform so zoom-in and zoom-out are equally likely.
            let (lo, hi) = (bounds.scale_min.ln(), bounds.scale_max.ln());
            rng.random_range(lo..=hi).exp()
        } else {
            bounds.scale_min
        };
        let (s, c) = angle.sin_cos();
        let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let scl = Matrix3::new(scale, 0.0, 0.0, 0.0, scale, 0.0, 0.0, 0.0, 1.0);
        let persp = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0);
        let hmat = translation(w / 2.0 + tx, h / 2.0 + ty) * rot * scl * persp * translation(-w / 2.0, -h / 2.0);
        if condition_number(&hmat) <= MAX_CONDITION {
            return Ok(hmat);
        }
    }
    Err(PrismError::Geometry(format!(
        "no homography with condition number <= {MAX_CONDITION} after {MAX_RETRIES} draws"
    )))
}

/// `B(x) = A(H^-1 x)` sampled at B's pixel centers, zeros where the source
/// point falls outside A.
pub fn warp_image(
    src: &ImageTensor,
    h: &Matrix3<f64>,
    height: usize,
    width: usize,
) -> Result<(ImageTensor, Vec<bool>)> {
    let inv = h
        .try_inverse()
        .ok_or_else(|| PrismError::Geometry("homography is not invertible".into()))?;
    let mut out = ImageTensor::zeros(height, width);
    let mut valid = vec![false; height * width];
    for y in 0..height {
        for x in 0..width {
            let v = inv * Vector3::new(x as f64 + 0.5, y as f64 + 0.5, 1.0);
            if v.z.abs() < 1e-12 {
                continue;
            }
            let (sx, sy) = (v.x / v.z, v.y / v.z);
            let samples: Option<Vec<f32>> = (0..3).map(|c| src.sample_bilinear(c, sx, sy)).collect();
            if let Some(s) = samples {
                for (c, val) in s.into_iter().enumerate() {
                    out.set(c, y, x, val);
                }
                valid[y * width + x] = true;
            }
        }
    }
    Ok((out, valid))
}

fn photometric(img: &mut ImageTensor, rng: &mut ChaCha8Rng, bounds: &PhotometricBounds) {
    if bounds.brightness == 0.0 && bounds.contrast == 0.0 {
        return;
    }
    let b = rng.random_range(-bounds.brightness..=bounds.brightness) as f32;
    let k = 1.0 + rng.random_range(-bounds.contrast..=bounds.contrast) as f32;
    for v in img.data_mut() {
        *v = ((*v - 0.5) * k + 0.5 + b).clamp(0.0, 1.0);
    }
}

/// Deterministic in `spec.seed`.
pub fn generate_pair(spec: &SyntheticPairSpec) -> Result<SyntheticPair> {
    spec.homography.validate()?;
    if spec.height == 0 || spec.width == 0 {
        return Err(PrismError::Shape("synthetic image must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = match &spec.base {
        BaseImage::Procedural => procedural_texture(&mut rng, spec.height, spec.width),
        BaseImage::Image(img) => img.resize(spec.height, spec.width),
    };
    let h = sample_homography(&mut rng, &spec.homography, spec.height, spec.width)?;
    let (mut b, valid_b) = warp_image(&a, &h, spec.height, spec.width)?;
    photometric(&mut b, &mut rng, &spec.photometric);
    Ok(SyntheticPair {
        pair: ImagePair {
            name: format!("synth_{:016x}", spec.seed),
            a,
            b,
        },
        geometry: GroundTruthGeometry::Homography(h),
        homography: h,
        valid_b,
    })
}

/// Per-pair seed for the `index`-th pair of a seeded collection.
pub fn pair_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` pairs sharing the bounds and base of `template`, seeded from its seed.
pub fn generate_set(template: &SyntheticPairSpec, count: usize) -> Result<Vec<SyntheticPair>> {
    (0..count)
        .map(|i| {
            generate_pair(&SyntheticPairSpec {
                seed: pair_seed(template.seed, i),
                ..template.clone()
            })
        })
        .collect()
}

/// The seeded procedural training set described by a run configuration.
pub fn training_set(config: &RunConfig) -> Result<Vec<DatasetEntry>> {
    let template = SyntheticPairSpec::procedural(config.seed, config.image_height, config.image_width);
    Ok(generate_set(&template, config.num_pairs)?
        .into_iter()
        .map(|p| DatasetEntry {
            pair: p.pair,
            geometry: p.geometry,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_bounds_give_identity() {
        let spec = SyntheticPairSpec {
            homography: HomographyBounds::identity(),
            photometric: PhotometricBounds::none(),
            ..SyntheticPairSpec::procedural(3, 32, 48)
        };
        let p = generate_pair(&spec).unwrap();
        assert_eq!(p.homography, Matrix3::identity());
        assert_eq!(p.pair.a, p.pair.b);
        assert!(p.valid_b.iter().all(|&v| v));
    }

    #[test]
    fn same_seed_same_pair() {
        let spec = SyntheticPairSpec::procedural(11, 32, 32);
        assert_eq!(generate_pair(&spec).unwrap(), generate_pair(&spec).unwrap());
        let other = SyntheticPairSpec::procedural(12, 32, 32);
        assert_ne!(
            generate_pair(&spec).unwrap().pair.a,
            generate_pair(&other).unwrap().pair.a
        );
    }

    #[test]
    fn bad_scale_rejected() {
        let mut b = HomographyBounds::identity();
        b.scale_min = 0.0;
        assert!(b.validate().is_err());
    }
}
