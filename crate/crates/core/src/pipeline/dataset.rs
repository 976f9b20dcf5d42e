//! On-disk pair datasets.
//!
//! ```text
//! root/pairs/<name>/a.png
//! root/pairs/<name>/b.png
//! root/pairs/<name>/gt.homog                      9 reals, row-major, A -> B
//! root/pairs/<name>/gt.pose + depth_a.bin + depth_b.bin
//! ```
//!
//! `gt.pose` holds the labeled blocks `K_A`, `R_A`, `t_A`, `K_B`, `R_B`, `t_B`
//! (label on its own line, then 9 or 3 reals). Rotations and translations map
//! world points into each camera. Depth files start with three little-endian
//! `u32` (height, width, 1) followed by `height * width` little-endian `f32`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::error::{PrismError, Result};
use crate::image::ImageTensor;
use crate::pipeline::synth::ImagePair;
use crate::supervision::{Camera, DepthMap, GroundTruthGeometry};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub pair: ImagePair,
    pub geometry: GroundTruthGeometry,
}

fn format_err(path: &Path, message: impl Into<String>) -> PrismError {
    PrismError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse_reals(path: &Path, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format_err(path, format!("not a finite number: {tok:?}")))
        })
        .collect()
}

pub fn read_homography(path: &Path) -> Result<Matrix3<f64>> {
    let v = parse_reals(path, &fs::read_to_string(path)?)?;
    if v.len() != 9 {
        return Err(format_err(path, format!("expected 9 numbers, found {}", v.len())));
    }
    Ok(Matrix3::from_row_slice(&v))
}

pub fn write_homography(path: &Path, h: &Matrix3<f64>) -> Result<()> {
    let mut s = String::new();
    for r in 0..3 {
        let row: Vec<String> = (0..3).map(|c| format!("{:?}", h[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

const POSE_BLOCKS: [(&str, usize); 6] = [("K_A", 9), ("R_A", 9), ("t_A", 3), ("K_B", 9), ("R_B", 9), ("t_B", 3)];

/// Cameras A and B from a `gt.pose` file.
pub fn read_pose(path: &Path) -> Result<(Camera, Camera)> {
    let text = fs::read_to_string(path)?;
    let mut blocks: HashMap<String, Vec<f64>> = HashMap::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if POSE_BLOCKS.iter().any(|(label, _)| *label == line) {
            if blocks.contains_key(line) {
                return Err(format_err(path, format!("block {line} appears twice")));
            }
            blocks.insert(line.to_string(), Vec::new());
            current = Some(line.to_string());
            continue;
        }
        let label = current
            .as_ref()
            .ok_or_else(|| format_err(path, "numbers before the first block label"))?;
        blocks
            .get_mut(label)
            .expect("inserted")
            .extend(parse_reals(path, line)?);
    }
    let mut take = |label: &str, n: usize| -> Result<Vec<f64>> {
        let v = blocks
            .remove(label)
            .ok_or_else(|| format_err(path, format!("missing block {label}")))?;
        if v.len() != n {
            return Err(format_err(
                path,
                format!("block {label} has {} numbers, expected {n}", v.len()),
            ));
        }
        Ok(v)
    };
    let m = |v: Vec<f64>| Matrix3::from_row_slice(&v);
    let t = |v: Vec<f64>| Vector3::new(v[0], v[1], v[2]);
    let a = Camera {
        intrinsics: m(take("K_A", 9)?),
        rotation: m(take("R_A", 9)?),
        translation: t(take("t_A", 3)?),
    };
    let b = Camera {
        intrinsics: m(take("K_B", 9)?),
        rotation: m(take("R_B", 9)?),
        translation: t(take("t_B", 3)?),
    };
    Ok((a, b))
}

fn push_matrix(s: &mut String, label: &str, m: &Matrix3<f64>) {
    s.push_str(label);
    s.push('\n');
    for r in 0..3 {
        s.push_str(&format!("{:?} {:?} {:?}\n", m[(r, 0)], m[(r, 1)], m[(r, 2)]));
    }
}

fn push_vector(s: &mut String, label: &str, v: &Vector3<f64>) {
    s.push_str(&format!("{label}\n{:?} {:?} {:?}\n", v.x, v.y, v.z));
}

pub fn write_pose(path: &Path, a: &Camera, b: &Camera) -> Result<()> {
    let mut s = String::new();
    push_matrix(&mut s, "K_A", &a.intrinsics);
    push_matrix(&mut s, "R_A", &a.rotation);
    push_vector(&mut s, "t_A", &a.translation);
    push_matrix(&mut s, "K_B", &b.intrinsics);
    push_matrix(&mut s, "R_B", &b.rotation);
    push_vector(&mut s, "t_B", &b.translation);
    fs::write(path, s)?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(format_err(path, "depth file shorter than its header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (word(0), word(1), word(2));
    if c != 1 {
        return Err(format_err(
            path,
            format!("depth must have one channel, header says {c}"),
        ));
    }
    if bytes.len() != 12 + 4 * h * w {
        return Err(format_err(
            path,
            format!("depth {h}x{w} needs {} bytes, file has {}", 12 + 4 * h * w, bytes.len()),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    DepthMap::new(h, w, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 4 * depth.data.len());
    for v in [depth.height as u32, depth.width as u32, 1] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in &depth.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes one pair in the dataset layout.
pub fn write_pair(root: &Path, entry: &DatasetEntry) -> Result<PathBuf> {
    let dir = root.join("pairs").join(&entry.pair.name);
    fs::create_dir_all(&dir)?;
    entry.pair.a.save_png(&dir.join("a.png"))?;
    entry.pair.b.save_png(&dir.join("b.png"))?;
    match &entry.geometry {
        GroundTruthGeometry::Homography(h) => write_homography(&dir.join("gt.homog"), h)?,
        GroundTruthGeometry::DepthPose {
            camera_a,
            camera_b,
            depth_a,
            depth_b,
        } => {
            write_pose(&dir.join("gt.pose"), camera_a, camera_b)?;
            write_depth(&dir.join("depth_a.bin"), depth_a)?;
            write_depth(&dir.join("depth_b.bin"), depth_b)?;
        }
    }
    Ok(dir)
}

/// Reads the pair stored in `dir`.
pub fn read_pair(dir: &Path) -> Result<DatasetEntry> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let homog = dir.join("gt.homog");
    let pose = dir.join("gt.pose");
    let geometry = if homog.is_file() {
        GroundTruthGeometry::Homography(read_homography(&homog)?)
    } else if pose.is_file() {
        let (camera_a, camera_b) = read_pose(&pose)?;
        GroundTruthGeometry::DepthPose {
            camera_a,
            camera_b,
            depth_a: read_depth(&dir.join("depth_a.bin"))?,
            depth_b: read_depth(&dir.join("depth_b.bin"))?,
        }
    } else {
        return Err(PrismError::MissingGeometry { pair: name });
    };
    geometry.validate().map_err(|e| format_err(dir, e.to_string()))?;
    let load = |file: &str| -> Result<ImageTensor> {
        let p = dir.join(file);
        ImageTensor::load_png(&p).map_err(|e| format_err(&p, e.to_string()))
    };
    Ok(DatasetEntry {
        pair: ImagePair {
            name,
            a: load("a.png")?,
            b: load("b.png")?,
        },
        geometry,
    })
}

/// Lazily reads pairs in name order. With `strict` every failure is yielded
/// as an error; otherwise malformed entries are logged and skipped, while a
/// pair without any geometry file is always reported.
pub struct Dataset {
    dirs: std::vec::IntoIter<PathBuf>,
    strict: bool,
}

impl Dataset {
    pub fn len_hint(&self) -> usize {
        self.dirs.len()
    }
}

impl Iterator for Dataset {
    type Item = Result<DatasetEntry>;

    fn next(&mut self) -> Option<Self::Item> {
        for dir in self.dirs.by_ref() {
            match read_pair(&dir) {
                Ok(entry) => return Some(Ok(entry)),
                Err(e @ PrismError::MissingGeometry { .. }) => return Some(Err(e)),
                Err(e) if self.strict => return Some(Err(e)),
                Err(e) => log::warn!("skipping {}: {e}", dir.display()),
            }
        }
        None
    }
}

/// Lists `root/pairs/*`. A root without a `pairs` directory is an empty dataset.
pub fn load_dataset(root: &Path, strict: bool) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(format_err(root, "dataset root is not a directory"));
    }
    let pairs = root.join("pairs");
    let mut dirs = Vec::new();
    if pairs.is_dir() {
        for entry in fs::read_dir(&pairs)? {
            let path = entry?.path();
            if path.is_dir() {
                dirs.push(path);
            }
        }
    }
    dirs.sort();
    Ok(Dataset {
        dirs: dirs.into_iter(),
        strict,
    })
}
