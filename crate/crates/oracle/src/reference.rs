//! Loop-based reference implementations on plain `f64` values. Nothing here
//! calls into the tensor code it is used to check.

use nalgebra::{Matrix3, Rotation3, Vector3};

/// Row-major dense matrix as nested rows.
pub type Mat = Vec<Vec<f64>>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y = W x (+ b)` for `W` stored as `[out][in]`.
pub fn affine(w: &Mat, b: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    w.iter()
        .enumerate()
        .map(|(o, row)| dot(row, x) + b.map_or(0.0, |b| b[o]))
        .collect()
}

/// Numerically stable softmax of the entries selected by `keep`; the others get 0.
pub fn masked_softmax(v: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = v
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v
        .iter()
        .zip(keep)
        .map(|(&x, &k)| if k { (x - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    masked_softmax(v, &vec![true; v.len()])
}

/// Normalized cell centers `((c + 0.5) / cols, (r + 0.5) / rows)` in row-major order.
pub fn cell_coords(rows: usize, cols: usize) -> Vec<[f64; 2]> {
    (0..rows * cols)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            [(c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64]
        })
        .collect()
}

/// Applies the transposed plane rotation `R(theta)^T` to consecutive pairs of
/// `v`, with `theta_k = freqs[k] . pos`.
pub fn rotate_planes(v: &[f64], pos: [f64; 2], freqs: &[[f64; 2]]) -> Vec<f64> {
    let mut out = v.to_vec();
    for (k, f) in freqs.iter().enumerate() {
        let theta = f[0] * pos[0] + f[1] * pos[1];
        let (s, c) = theta.sin_cos();
        let (a, b) = (v[2 * k], v[2 * k + 1]);
        out[2 * k] = a * c + b * s;
        out[2 * k + 1] = -a * s + b * c;
    }
    out
}

/// `q^T R(delta) k` with `R` built explicitly as a block-diagonal matrix of
/// 2x2 rotations by `freqs[k] . delta`.
pub fn relative_rotation_form(q: &[f64], k: &[f64], delta: [f64; 2], freqs: &[[f64; 2]]) -> f64 {
    let d = q.len();
    let mut r = vec![vec![0.0; d]; d];
    for (p, f) in freqs.iter().enumerate() {
        let theta = f[0] * delta[0] + f[1] * delta[1];
        let (s, c) = theta.sin_cos();
        r[2 * p][2 * p] = c;
        r[2 * p][2 * p + 1] = -s;
        r[2 * p + 1][2 * p] = s;
        r[2 * p + 1][2 * p + 1] = c;
    }
    dot(q, &affine(&r, None, k))
}

/// Square convolution with kernel equal to stride and no padding, over a
/// channel-major map `[c][rows * cols]`.
pub struct ConvWeights {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    /// `[c_out][c_in][k][k]` flattened.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvWeights {
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        let k = self.kernel;
        self.weight[((o * self.c_in + i) * k + ky) * k + kx]
    }

    /// Returns tokens `[(rows / k) * (cols / k)][c_out]`.
    pub fn patchify(&self, map: &[Vec<f64>], rows: usize, cols: usize) -> Mat {
        let k = self.kernel;
        let (ho, wo) = (rows / k, cols / k);
        let mut out = vec![vec![0.0; self.c_out]; ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                for (o, slot) in out[y * wo + x].iter_mut().enumerate() {
                    let mut acc = self.bias[o];
                    for (i, plane) in map.iter().enumerate() {
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += self.w(o, i, ky, kx) * plane[(y * k + ky) * cols + x * k + kx];
                            }
                        }
                    }
                    *slot = acc;
                }
            }
        }
        out
    }
}

/// Parameters of one scale-aware attention block, copied out of the module.
pub struct SadpaWeights {
    pub heads: usize,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Kernel sizes 4, 2, 1 for the 1/32, 1/16 and 1/8 levels.
    pub levels: [ConvWeights; 3],
    /// Present in self attention only.
    pub freqs: Option<Vec<[f64; 2]>>,
}

/// Grid shape and tokens of one side.
pub struct Side<'a> {
    pub tokens: &'a Mat,
    pub mask: &'a [bool],
    pub rows: usize,
    pub cols: usize,
}

/// Per-level attention messages for every source token. Levels 2 and 3 see the
/// target map multiplied by its mask and sample the mask at the top-left cell
/// of each block; level 1 sees everything. A level without kept keys yields zeros.
pub fn sadpa_messages(w: &SadpaWeights, src: &Side, dst: &Side) -> [Mat; 3] {
    let c = w.q.len();
    let d = c / w.heads;
    let scale = 1.0 / (d as f64).sqrt();
    let src_coords = cell_coords(src.rows, src.cols);
    let queries: Mat = src
        .tokens
        .iter()
        .zip(src.mask)
        .map(|(f, &m)| {
            affine(&w.q, None, f)
                .into_iter()
                .map(|x| if m { x } else { 0.0 })
                .collect()
        })
        .collect();
    let mut out: [Mat; 3] = Default::default();
    for (level, conv) in w.levels.iter().enumerate() {
        let ratio = conv.kernel;
        let masked = level > 0;
        let map: Vec<Vec<f64>> = (0..c)
            .map(|ch| {
                dst.tokens
                    .iter()
                    .zip(dst.mask)
                    .map(|(f, &m)| if masked && !m { 0.0 } else { f[ch] })
                    .collect()
            })
            .collect();
        let tokens = conv.patchify(&map, dst.rows, dst.cols);
        let (lr, lc) = (dst.rows / ratio, dst.cols / ratio);
        let keep: Vec<bool> = (0..lr * lc)
            .map(|i| !masked || dst.mask[(i / lc) * ratio * dst.cols + (i % lc) * ratio])
            .collect();
        let key_coords = cell_coords(lr, lc);
        let keys: Mat = tokens.iter().map(|t| affine(&w.k, None, t)).collect();
        let values: Mat = tokens.iter().map(|t| affine(&w.v, None, t)).collect();
        out[level] = queries
            .iter()
            .enumerate()
            .map(|(qi, q)| {
                let mut msg = vec![0.0; c];
                if !keep.iter().any(|&k| k) {
                    return msg;
                }
                for h in 0..w.heads {
                    let span = h * d..(h + 1) * d;
                    let qh = match &w.freqs {
                        Some(f) => rotate_planes(&q[span.clone()], src_coords[qi], f),
                        None => q[span.clone()].to_vec(),
                    };
                    let logits: Vec<f64> = keys
                        .iter()
                        .enumerate()
                        .map(|(j, k)| {
                            let kh = match &w.freqs {
                                Some(f) => rotate_planes(&k[span.clone()], key_coords[j], f),
                                None => k[span.clone()].to_vec(),
                            };
                            dot(&qh, &kh) * scale
                        })
                        .collect();
                    let attn = masked_softmax(&logits, &keep);
                    for (j, a) in attn.iter().enumerate() {
                        if keep[j] {
                            for (t, idx) in span.clone().enumerate() {
                                msg[h * d + t] += a * values[j][idx];
                            }
                        }
                    }
                }
                msg
            })
            .collect();
    }
    out
}

/// Closed form of the weighted dual softmax on a 2x2 similarity:
/// `P_ij = sa_i sb_j / ((1 + e^(S_i,j' - S_ij)) (1 + e^(S_i',j - S_ij)))`.
pub fn dual_softmax_2x2(s: [[f64; 2]; 2], sa: [f64; 2], sb: [f64; 2]) -> [[f64; 2]; 2] {
    let mut p = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let row = 1.0 + (s[i][1 - j] - s[i][j]).exp();
            let col = 1.0 + (s[1 - i][j] - s[i][j]).exp();
            p[i][j] = sa[i] * sb[j] / (row * col);
        }
    }
    p
}

/// Every `(i, j)` such that `P_ij > theta`, both patches are kept, and `P_ij`
/// beats every other entry of its row and column; an equal entry at a lower
/// index wins the tie.
pub fn mnn_enumerate(p: &Mat, theta: f64, keep_a: &[bool], keep_b: &[bool]) -> Vec<(usize, usize)> {
    let rows = p.len();
    let cols = p.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let v = p[i][j];
            let row_best = (0..cols).all(|k| k == j || (k < j && p[i][k] < v) || (k > j && p[i][k] <= v));
            let col_best = (0..rows).all(|k| k == i || (k < i && p[k][j] < v) || (k > i && p[k][j] <= v));
            if row_best && col_best && v > theta && keep_a[i] && keep_b[j] {
                out.push((i, j));
            }
        }
    }
    out
}

fn shannon(p: impl Iterator<Item = f64>) -> f64 {
    p.filter(|&x| x > 0.0).map(|x| -x * x.ln()).sum()
}

/// `2 (H(X) + H(Y) - H(X, Y)) / (H(X) + H(Y))` from entropies of the table.
pub fn nmi(joint: &Mat) -> f64 {
    let rows = joint.len();
    let cols = joint[0].len();
    let hx = shannon((0..rows).map(|x| joint[x].iter().sum()));
    let hy = shannon((0..cols).map(|y| (0..rows).map(|x| joint[x][y]).sum()));
    let hxy = shannon(joint.iter().flatten().copied());
    if hx + hy == 0.0 {
        return 0.0;
    }
    2.0 * (hx + hy - hxy) / (hx + hy)
}

/// Rotation angle in degrees via the trace formula, clamped for round-off.
pub fn rotation_error_deg(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let c = (((r_est.transpose() * r_gt).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Angle between two directions, ignoring sign.
pub fn direction_error_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = (a.dot(b).abs() / (a.norm() * b.norm())).clamp(0.0, 1.0);
    c.acos().to_degrees()
}

pub fn axis_angle(axis: Vector3<f64>, degrees: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), degrees.to_radians()).into_inner()
}

/// Pinhole projection of a camera-frame point.
pub fn project(k: &Matrix3<f64>, x: &Vector3<f64>) -> [f64; 2] {
    let p = k * (x / x.z);
    [p.x, p.y]
}

/// Maximum corner displacement between two homographies on a `w x h` image,
/// with the four corners written out explicitly.
pub fn corner_distance(h1: &Matrix3<f64>, h2: &Matrix3<f64>, w: f64, h: f64) -> f64 {
    [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]]
        .iter()
        .map(|c| {
            let a = h1 * Vector3::new(c[0], c[1], 1.0);
            let b = h2 * Vector3::new(c[0], c[1], 1.0);
            ((a.x / a.z - b.x / b.z).powi(2) + (a.y / a.z - b.y / b.z).powi(2)).sqrt()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_dual_softmax_reference_value() {
        let p = dual_softmax_2x2([[10.0, 0.0], [0.0, 10.0]], [1.0, 1.0], [1.0, 1.0]);
        let expected = (1.0 / (1.0 + (-10f64).exp())).powi(2);
        assert!((p[0][0] - expected).abs() < 1e-15);
        assert!((p[0][0] - 0.99991).abs() < 1e-5);
    }

    #[test]
    fn nmi_reference_value() {
        let v = nmi(&vec![vec![0.4, 0.1], vec![0.1, 0.4]]);
        assert!((v - 0.27807190511263746).abs() < 1e-12, "{v}");
    }

    #[test]
    fn rotation_of_a_plane_is_isometric() {
        let v = [0.3, -1.2, 2.0, 0.5];
        let r = rotate_planes(&v, [0.4, 0.9], &[[1.0, 0.0], [0.0, 3.0]]);
        assert!((dot(&r, &r) - dot(&v, &v)).abs() < 1e-12);
    }

    #[test]
    fn mnn_tie_goes_to_lower_index() {
        let p = vec![vec![0.5, 0.5], vec![0.1, 0.2]];
        assert_eq!(mnn_enumerate(&p, 0.0, &[true; 2], &[true; 2]), vec![(0, 0)]);
    }
}
