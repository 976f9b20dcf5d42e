use std::collections::HashMap;
use std::fs;

use candle_core::DType;
use nalgebra::{Matrix3, Vector3};
use prism_core::grid::CoarseGrid;
use prism_core::image::ImageTensor;
use prism_core::pipeline::checkpoint::{load_into, load_model, read_checkpoint, save_checkpoint};
use prism_core::pipeline::config::RunConfig;
use prism_core::pipeline::dataset::{load_dataset, read_homography, write_homography, write_pair, DatasetEntry};
use prism_core::pipeline::synth::{
    generate_pair, sample_homography, warp_image, HomographyBounds, ImagePair, PhotometricBounds, SyntheticPairSpec,
};
use prism_core::supervision::{ground_truth_coarse, GroundTruthGeometry};
use prism_core::{ModelConfig, PrismError, PrismModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn project(h: &Matrix3<f64>, x: f64, y: f64) -> [f64; 2] {
    let v = h * Vector3::new(x, y, 1.0);
    [v.x / v.z, v.y / v.z]
}

fn shoelace(pts: &[[f64; 2]]) -> f64 {
    let n = pts.len();
    (0..n)
        .map(|i| {
            let (p, q) = (pts[i], pts[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

#[test]
fn scale_two_quadruples_area() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for perspective in [0.0, 1e-3] {
        let bounds = HomographyBounds {
            scale_min: 2.0,
            scale_max: 2.0,
            perspective,
            ..HomographyBounds::moderate()
        };
        for _ in 0..20 {
            let h = sample_homography(&mut rng, &bounds, 128, 128).unwrap();
            let (cx, cy) = (rng.random_range(40.0..88.0), rng.random_range(40.0..88.0));
            let square = [[cx, cy], [cx + 1.0, cy], [cx + 1.0, cy + 1.0], [cx, cy + 1.0]];
            let warped: Vec<[f64; 2]> = square.iter().map(|p| project(&h, p[0], p[1])).collect();
            let ratio = shoelace(&warped) / shoelace(&square);
            let tol = if perspective == 0.0 { 1e-9 } else { 0.05 };
            assert!(
                (ratio - 4.0).abs() < tol,
                "area ratio {ratio} at perspective {perspective}"
            );
        }
    }
}

#[test]
fn homography_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gt.homog");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let h = Matrix3::from_fn(|_, _| rng.random_range(-1e3..1e3) * 10f64.powi(rng.random_range(-6..3)));
        write_homography(&path, &h).unwrap();
        let back = read_homography(&path).unwrap();
        for (a, b) in h.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn malformed_homography_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gt.homog");
    fs::write(&path, "1 0 0 0 1 0 0 0").unwrap();
    let err = read_homography(&path).unwrap_err();
    assert!(err.to_string().contains("gt.homog"), "{err}");
}

/// Image whose first two channels hold the pixel-centre coordinates divided
/// by the image size, so a warp can be read back point by point.
fn coordinate_ramp(h: usize, w: usize) -> ImageTensor {
    let mut img = ImageTensor::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            img.set(0, y, x, ((x as f64 + 0.5) / w as f64) as f32);
            img.set(1, y, x, ((y as f64 + 0.5) / h as f64) as f32);
        }
    }
    img
}

#[test]
fn rendered_warp_agrees_with_stored_homography() {
    let (h, w) = (128, 128);
    let ramp = coordinate_ramp(h, w);
    let grid = CoarseGrid::for_image(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut compared = 0;
    for _ in 0..10 {
        let hmat = sample_homography(&mut rng, &HomographyBounds::moderate(), h, w).unwrap();
        let (b, _) = warp_image(&ramp, &hmat, h, w).unwrap();
        for i in 0..grid.len() {
            let p = grid.center(i);
            let q = project(&hmat, p[0], p[1]);
            // Stay a pixel inside B so bilinear lookups never touch the border.
            if !(1.0..w as f64 - 1.0).contains(&q[0]) || !(1.0..h as f64 - 1.0).contains(&q[1]) {
                continue;
            }
            let (Some(rx), Some(ry)) = (b.sample_bilinear(0, q[0], q[1]), b.sample_bilinear(1, q[0], q[1])) else {
                continue;
            };
            let back = [rx as f64 * w as f64, ry as f64 * h as f64];
            let err = ((back[0] - p[0]).powi(2) + (back[1] - p[1]).powi(2)).sqrt();
            assert!(err < 0.5, "grid point {p:?} read back at {back:?}");
            compared += 1;
        }
    }
    assert!(compared > 1000, "only {compared} points compared");
}

#[test]
fn zero_jitter_gives_identity_and_equal_images() {
    let spec = SyntheticPairSpec {
        homography: HomographyBounds::identity(),
        photometric: PhotometricBounds::none(),
        ..SyntheticPairSpec::procedural(9, 64, 64)
    };
    let p = generate_pair(&spec).unwrap();
    assert_eq!(p.homography, Matrix3::identity());
    assert_eq!(p.pair.a, p.pair.b);
}

#[test]
fn empty_directory_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(load_dataset(dir.path(), true).unwrap().count(), 0);
    fs::create_dir(dir.path().join("pairs")).unwrap();
    assert_eq!(load_dataset(dir.path(), true).unwrap().count(), 0);
}

#[test]
fn identity_pair_round_trips_to_diagonal_matches() {
    let dir = tempfile::tempdir().unwrap();
    // PNG stores 8-bit samples, so start from an already quantized image.
    let png = dir.path().join("source.png");
    generate_pair(&SyntheticPairSpec::procedural(1, 64, 96))
        .unwrap()
        .pair
        .a
        .save_png(&png)
        .unwrap();
    let img = ImageTensor::load_png(&png).unwrap();
    let entry = DatasetEntry {
        pair: ImagePair {
            name: "same".into(),
            a: img.clone(),
            b: img,
        },
        geometry: GroundTruthGeometry::Homography(Matrix3::identity()),
    };
    write_pair(dir.path(), &entry).unwrap();
    let loaded: Vec<DatasetEntry> = load_dataset(dir.path(), true).unwrap().map(Result::unwrap).collect();
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded[0], entry);
    let grid = CoarseGrid::for_image(64, 96);
    let labels = ground_truth_coarse(&loaded[0].geometry, grid, grid).unwrap();
    let diagonal: Vec<(usize, usize)> = (0..grid.len()).map(|i| (i, i)).collect();
    assert_eq!(labels.matches, diagonal);
}

#[test]
fn missing_geometry_names_the_pair() {
    let dir = tempfile::tempdir().unwrap();
    let pair_dir = dir.path().join("pairs").join("lonely");
    fs::create_dir_all(&pair_dir).unwrap();
    ImageTensor::zeros(32, 32).save_png(&pair_dir.join("a.png")).unwrap();
    ImageTensor::zeros(32, 32).save_png(&pair_dir.join("b.png")).unwrap();
    for strict in [false, true] {
        let mut ds = load_dataset(dir.path(), strict).unwrap();
        match ds.next() {
            Some(Err(PrismError::MissingGeometry { pair })) => assert_eq!(pair, "lonely"),
            other => panic!("expected a missing-geometry error, got {other:?}"),
        }
    }
}

#[test]
fn lenient_loading_skips_malformed_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageTensor::zeros(32, 32);
    for name in ["good", "bad"] {
        let entry = DatasetEntry {
            pair: ImagePair {
                name: name.into(),
                a: img.clone(),
                b: img.clone(),
            },
            geometry: GroundTruthGeometry::Homography(Matrix3::identity()),
        };
        write_pair(dir.path(), &entry).unwrap();
    }
    fs::write(dir.path().join("pairs/bad/gt.homog"), "not numbers").unwrap();
    let lenient: Vec<_> = load_dataset(dir.path(), false).unwrap().collect();
    assert_eq!(lenient.len(), 1);
    assert_eq!(lenient[0].as_ref().unwrap().pair.name, "good");
    let strict: Vec<_> = load_dataset(dir.path(), true).unwrap().collect();
    assert!(strict[0].is_err(), "bad sorts first and must fail in strict mode");
}

fn toy_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let config = RunConfig::toy();
    let model = PrismModel::new(config.model_config().unwrap(), 4, DType::F32).unwrap();
    let path = dir.join("toy.ckpt");
    save_checkpoint(&path, &model, &config, 7).unwrap();
    path
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::toy();
    let model = PrismModel::new(config.model_config().unwrap(), 4, DType::F32).unwrap();
    let path = dir.path().join("toy.ckpt");
    save_checkpoint(&path, &model, &config, 7).unwrap();
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(leftovers, ["toy.ckpt"], "the temporary file must be renamed away");
    let (loaded, ckpt) = load_model(&path).unwrap();
    assert_eq!(ckpt.manifest.step, 7);
    assert_eq!(ckpt.manifest.config, config);
    assert_eq!(loaded.store().len(), model.store().len());
    for (name, var) in model.store().iter() {
        let a = var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = loaded
            .store()
            .get(name)
            .unwrap()
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
    }
}

#[test]
fn truncated_checkpoint_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = toy_checkpoint(dir.path());
    let bytes = fs::read(&path).unwrap();
    for keep in [0, 5, 100, bytes.len() - 1] {
        let cut = dir.path().join("cut.ckpt");
        fs::write(&cut, &bytes[..keep]).unwrap();
        match read_checkpoint(&cut) {
            Err(PrismError::Integrity(_)) => {}
            other => panic!("{keep} bytes: expected an integrity error, got {:?}", other.map(|_| ())),
        }
    }
}

#[test]
fn version_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = toy_checkpoint(dir.path());
    let bytes = fs::read(&path).unwrap();
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[8..8 + len].to_vec()).unwrap();
    let patched = header.replacen("\"version\":1", "\"version\":9", 1);
    assert_ne!(patched, header);
    let mut out = (patched.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(patched.as_bytes());
    out.extend_from_slice(&bytes[8 + len..]);
    fs::write(&path, out).unwrap();
    match read_checkpoint(&path) {
        Err(PrismError::VersionMismatch { found: 9, expected: 1 }) => {}
        other => panic!("expected a version mismatch, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn toy_checkpoint_into_full_model_names_first_offending_array() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = read_checkpoint(&toy_checkpoint(dir.path())).unwrap();
    let full = PrismModel::new(ModelConfig::full(), 0, DType::F32).unwrap();
    let before: Vec<f32> = full
        .store()
        .iter()
        .next()
        .unwrap()
        .1
        .as_tensor()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();

    let shapes: HashMap<&str, &[usize]> = ckpt
        .manifest
        .arrays
        .iter()
        .map(|a| (a.name.as_str(), a.shape.as_slice()))
        .collect();
    let first_bad = full
        .store()
        .iter()
        .find(|(name, var)| shapes.get(name.as_str()) != Some(&var.as_tensor().dims()))
        .map(|(name, _)| name.clone())
        .unwrap();

    match load_into(&full, &ckpt) {
        Err(PrismError::ShapeMismatch { name, .. }) => assert_eq!(name, first_bad),
        other => panic!("expected a shape mismatch, got {other:?}"),
    }
    let after: Vec<f32> = full
        .store()
        .iter()
        .next()
        .unwrap()
        .1
        .as_tensor()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    assert_eq!(before, after, "no parameter may change on a failed load");
}
