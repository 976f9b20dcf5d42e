//! Coarse matching by relevance-weighted dual softmax with mutual nearest
//! neighbour selection, followed by window-correlation sub-pixel refinement.

use candle_core::{DType, Tensor, D};

use crate::error::{PrismError, Result};
use crate::grid::{CoarseGrid, PatchMask, FINE_STRIDE};
use crate::nn::{softmax_last, to_vec_f64};

pub const DEFAULT_THETA_C: f64 = 0.2;
/// Temperature; the similarity multiplier used by the model is `1 / tau`.
pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_WINDOW: usize = 5;

/// `S(i, j) = tau * <F_A(i), F_B(j)>`.
pub fn similarity(f_a: &Tensor, f_b: &Tensor, tau: f64) -> Result<Tensor> {
    if tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(PrismError::InvalidInput(format!(
            "similarity scale must be positive, got {tau}"
        )));
    }
    let (_, ca) = f_a.dims2()?;
    let (_, cb) = f_b.dims2()?;
    if ca != cb {
        return Err(PrismError::Shape(format!("feature dims differ: {ca} vs {cb}")));
    }
    Ok((f_a.matmul(&f_b.t()?)? * tau)?)
}

/// `P(i, j) = sigma_A(i) sigma_B(j) softmax(S(i, .))_j softmax(S(., j))_i`.
pub fn weighted_dual_softmax(s: &Tensor, sigma_a: &Tensor, sigma_b: &Tensor) -> Result<Tensor> {
    let (m, n) = s.dims2()?;
    if sigma_a.dims() != [m] || sigma_b.dims() != [n] {
        return Err(PrismError::Shape(format!(
            "score vectors {:?} / {:?} do not fit a {m}x{n} similarity",
            sigma_a.dims(),
            sigma_b.dims()
        )));
    }
    let row = softmax_last(s)?;
    let col = softmax_last(&s.t()?)?.t()?;
    let p = (row * col)?;
    Ok(p.broadcast_mul(&sigma_a.unsqueeze(1)?)?
        .broadcast_mul(&sigma_b.unsqueeze(0)?)?)
}

/// Dense row-major matrix of assignment probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PrismError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        Self::new(rows, cols, to_vec_f64(t)?)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn row_argmax(&self, i: usize) -> usize {
        let mut best = 0;
        for j in 1..self.cols {
            if self.get(i, j) > self.get(i, best) {
                best = j;
            }
        }
        best
    }

    fn col_argmax(&self, j: usize) -> usize {
        let mut best = 0;
        for i in 1..self.rows {
            if self.get(i, j) > self.get(best, j) {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseMatch {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
}

/// Keeps `(i, j)` when `P(i, j) > theta_c`, `j` is the row maximum, `i` is
/// the column maximum and neither patch is pruned. Ties go to the lower index.
pub fn select_coarse(
    p: &ScoreMatrix,
    theta_c: f64,
    mask_a: &PatchMask,
    mask_b: &PatchMask,
) -> Result<Vec<CoarseMatch>> {
    if mask_a.keep().len() != p.rows || mask_b.keep().len() != p.cols {
        return Err(PrismError::Shape("masks do not fit the assignment matrix".into()));
    }
    if p.cols == 0 {
        return Ok(Vec::new());
    }
    let col_best: Vec<usize> = (0..p.cols).map(|j| p.col_argmax(j)).collect();
    let mut out = Vec::new();
    for i in 0..p.rows {
        let j = p.row_argmax(i);
        let v = p.get(i, j);
        if v > theta_c && col_best[j] == i && mask_a.get(i) && mask_b.get(j) {
            out.push(CoarseMatch { i, j, confidence: v });
        }
    }
    Ok(out)
}

/// Expected offset (`[n, 2]`, as `(dx, dy)` in fine pixels) and total variance
/// (`[n]`, fine pixels squared) of `[n, w*w]` heatmaps laid out row-major over
/// offsets `-r..=r`.
pub fn heatmap_expectation(heat: &Tensor, window: usize) -> Result<(Tensor, Tensor)> {
    let (_, k) = heat.dims2()?;
    if window % 2 == 0 || k != window * window {
        return Err(PrismError::Shape(format!(
            "heatmap of {k} cells does not match window {window}"
        )));
    }
    let r = (window / 2) as f64;
    let mut grid = Vec::with_capacity(2 * k);
    for idx in 0..k {
        grid.push((idx % window) as f64 - r);
        grid.push((idx / window) as f64 - r);
    }
    let grid = Tensor::from_vec(grid, (k, 2), heat.device())?.to_dtype(heat.dtype())?;
    let mean = heat.matmul(&grid)?;
    let second = heat.matmul(&grid.sqr()?)?;
    let var = (second - mean.sqr()?)?.relu()?.sum(D::Minus1)?;
    Ok((mean, var))
}

/// Differentiable refinement for a list of `(i, j)` coarse pairs.
#[derive(Debug, Clone)]
pub struct RefineOutput {
    /// Indices into the input pair list that survived the bounds check.
    pub kept: Vec<usize>,
    /// Refined positions in image B, `[n, 2]`, image pixels.
    pub points_b: Tensor,
    /// Query positions in image A, image pixels.
    pub points_a: Vec<[f64; 2]>,
    /// Total heatmap variance, `[n]`, image pixels squared.
    pub variance: Tensor,
}

fn window_in_bounds(anchor: (usize, usize), radius: usize, width: usize, height: usize) -> bool {
    anchor.0 >= radius && anchor.1 >= radius && anchor.0 + radius < width && anchor.1 + radius < height
}

/// Correlates the anchor feature of each A patch with the `w x w` window of
/// fine features around the B anchor, turns the scores into a heatmap and
/// takes its expectation. `fine_a`/`fine_b` are `[C, Hf, Wf]`.
pub fn refine_pairs(
    pairs: &[(usize, usize)],
    grid_a: CoarseGrid,
    grid_b: CoarseGrid,
    fine_a: &Tensor,
    fine_b: &Tensor,
    window: usize,
) -> Result<RefineOutput> {
    if window % 2 == 0 || window == 0 {
        return Err(PrismError::InvalidInput(format!(
            "refinement window {window} must be odd"
        )));
    }
    let (c, ha, wa) = fine_a.dims3()?;
    let (cb, hb, wb) = fine_b.dims3()?;
    if c != cb {
        return Err(PrismError::Shape("fine maps have different channel counts".into()));
    }
    let radius = window / 2;
    let mut kept = Vec::new();
    let mut idx_a = Vec::new();
    let mut idx_b = Vec::new();
    let mut anchor_b = Vec::new();
    let mut points_a = Vec::new();
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let aa = grid_a.fine_anchor(i);
        let ab = grid_b.fine_anchor(j);
        if !window_in_bounds(aa, 0, wa, ha) || !window_in_bounds(ab, radius, wb, hb) {
            continue;
        }
        kept.push(k);
        idx_a.push((aa.1 * wa + aa.0) as u32);
        for dy in 0..window {
            for dx in 0..window {
                let y = ab.1 + dy - radius;
                let x = ab.0 + dx - radius;
                idx_b.push((y * wb + x) as u32);
            }
        }
        anchor_b.push(ab.0 as f64);
        anchor_b.push(ab.1 as f64);
        points_a.push(grid_a.anchor_point(i));
    }
    let n = kept.len();
    let dtype = fine_a.dtype();
    let device = fine_a.device();
    if n == 0 {
        return Ok(RefineOutput {
            kept,
            points_b: Tensor::zeros((0, 2), dtype, device)?,
            points_a,
            variance: Tensor::zeros(0, dtype, device)?,
        });
    }
    let tokens_a = fine_a.reshape((c, ha * wa))?.t()?.contiguous()?;
    let tokens_b = fine_b.reshape((c, hb * wb))?.t()?.contiguous()?;
    let idx_a = Tensor::from_vec(idx_a, n, device)?;
    let idx_b = Tensor::from_vec(idx_b, n * window * window, device)?;
    let centers = tokens_a.index_select(&idx_a, 0)?.unsqueeze(1)?;
    let windows = tokens_b.index_select(&idx_b, 0)?.reshape((n, window * window, c))?;
    let scores = (centers.matmul(&windows.transpose(1, 2)?)?.squeeze(1)? * (1.0 / (c as f64).sqrt()))?;
    let heat = softmax_last(&scores)?;
    let (offset, var) = heatmap_expectation(&heat, window)?;
    let anchor_b = Tensor::from_vec(anchor_b, (n, 2), device)?.to_dtype(dtype)?;
    let s = FINE_STRIDE as f64;
    let points_b = ((offset + anchor_b)?.affine(s, s / 2.0))?;
    let variance = (var * (s * s))?;
    Ok(RefineOutput {
        kept,
        points_b,
        points_a,
        variance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineMatch {
    pub coarse: CoarseMatch,
    pub point_a: [f64; 2],
    pub point_b: [f64; 2],
    pub confidence: f64,
    pub variance: f64,
}

/// Coarse and refined matches for one image pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub coarse: Vec<CoarseMatch>,
    pub fine: Vec<FineMatch>,
    /// Coarse matches dropped because their window left the fine map.
    pub dropped: usize,
}

/// Refines selected coarse matches.
pub fn refine(
    coarse: &[CoarseMatch],
    grid_a: CoarseGrid,
    grid_b: CoarseGrid,
    fine_a: &Tensor,
    fine_b: &Tensor,
    window: usize,
) -> Result<MatchSet> {
    let pairs: Vec<(usize, usize)> = coarse.iter().map(|m| (m.i, m.j)).collect();
    let out = refine_pairs(&pairs, grid_a, grid_b, fine_a, fine_b, window)?;
    let pts = out.points_b.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let var = to_vec_f64(&out.variance)?;
    let fine = out
        .kept
        .iter()
        .enumerate()
        .map(|(row, &k)| FineMatch {
            coarse: coarse[k],
            point_a: out.points_a[row],
            point_b: [pts[row][0], pts[row][1]],
            confidence: coarse[k].confidence,
            variance: var[row],
        })
        .collect::<Vec<_>>();
    Ok(MatchSet {
        coarse: coarse.to_vec(),
        dropped: coarse.len() - fine.len(),
        fine,
    })
}

/// `x` with `digits` significant digits, in plain notation for exponents in
/// `[-5, digits)` and scientific notation otherwise. Trailing zeros are trimmed.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = digits.max(1);
    let sci = format!("{x:.*e}", digits - 1);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -5 || exp >= digits as i32 {
        format!("{}e{exp}", trim(mantissa))
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    }
}

/// Match file body: one `x_A y_A x_B y_B confidence` line per match.
pub fn format_matches(matches: &[FineMatch]) -> String {
    let mut out = String::new();
    for m in matches {
        let fields = [m.point_a[0], m.point_a[1], m.point_b[0], m.point_b[1], m.confidence];
        let line: Vec<String> = fields.iter().map(|&v| format_significant(v, 6)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t2(v: &[f64], r: usize, c: usize) -> Tensor {
        Tensor::from_vec(v.to_vec(), (r, c), &Device::Cpu).unwrap()
    }

    #[test]
    fn six_significant_digits() {
        let cases = [
            (123.456789, "123.457"),
            (0.000123456789, "0.000123457"),
            (1234567.0, "1.23457e6"),
            (2.0, "2"),
            (-0.5, "-0.5"),
            (99.99996, "100"),
            (1.5e-7, "1.5e-7"),
        ];
        for (x, want) in cases {
            assert_eq!(format_significant(x, 6), want, "{x}");
        }
    }

    #[test]
    fn orthonormal_rows_give_identity() {
        let f = t2(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 2, 3);
        let s = similarity(&f, &f, 1.0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(s, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s2 = similarity(&f, &f, 2.0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(s2, vec![vec![2.0, 0.0], vec![0.0, 2.0]]);
        assert!(similarity(&f, &f, 0.0).is_err());
    }

    #[test]
    fn single_element_assignment_is_one() {
        let s = t2(&[3.7], 1, 1);
        let one = Tensor::ones(1, DType::F64, &Device::Cpu).unwrap();
        let p = weighted_dual_softmax(&s, &one, &one).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(p[0][0], 1.0);
    }

    #[test]
    fn relevance_scales_rows() {
        let s = t2(&[0.3, -1.0, 2.0, 0.5], 2, 2);
        let one = Tensor::ones(2, DType::F64, &Device::Cpu).unwrap();
        let half = Tensor::new(&[0.5f64, 1.0], &Device::Cpu).unwrap();
        let p1 = weighted_dual_softmax(&s, &one, &one).unwrap().to_vec2::<f64>().unwrap();
        let p2 = weighted_dual_softmax(&s, &half, &one)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        assert_eq!(p2[0][0], 0.5 * p1[0][0]);
        assert_eq!(p2[0][1], 0.5 * p1[0][1]);
        assert_eq!(p2[1], p1[1]);
    }

    #[test]
    fn selection_edge_cases() {
        let g = CoarseGrid::new(1, 3);
        let ones = PatchMask::ones(g);
        let diag = ScoreMatrix::new(3, 3, vec![0.9, 0.01, 0.01, 0.01, 0.9, 0.01, 0.01, 0.01, 0.9]).unwrap();
        let m = select_coarse(&diag, 0.2, &ones, &ones).unwrap();
        assert_eq!(
            m.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(),
            vec![(0, 0), (1, 1), (2, 2)]
        );

        let low = ScoreMatrix::new(3, 3, vec![0.1; 9]).unwrap();
        assert!(select_coarse(&low, 0.2, &ones, &ones).unwrap().is_empty());

        // Row 0 prefers column 1, but column 1 prefers row 2.
        let p = ScoreMatrix::new(3, 3, vec![0.3, 0.5, 0.1, 0.6, 0.1, 0.2, 0.0, 0.7, 0.25]).unwrap();
        let m = select_coarse(&p, 0.2, &ones, &ones).unwrap();
        assert!(m.iter().all(|m| !(m.i == 0 && m.j == 1)));
        assert_eq!(m.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(), vec![(1, 0), (2, 1)]);

        let pruned = PatchMask::from_vec(g, vec![true, false, true]).unwrap();
        let m = select_coarse(&diag, 0.2, &pruned, &ones).unwrap();
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn one_hot_heatmap_expectation() {
        let w = 5;
        let mut heat = vec![0.0; w * w];
        // dy = -1, dx = +1
        heat[(2 - 1) * w + (2 + 1)] = 1.0;
        let (mean, var) = heatmap_expectation(&t2(&heat, 1, w * w), w).unwrap();
        assert_eq!(mean.to_vec2::<f64>().unwrap(), vec![vec![1.0, -1.0]]);
        assert_eq!(var.to_vec1::<f64>().unwrap(), vec![0.0]);
    }

    #[test]
    fn symmetric_heatmap_has_zero_offset() {
        let w = 5;
        let heat: Vec<f64> = (0..w * w)
            .map(|k| {
                let (x, y) = ((k % w) as f64 - 2.0, (k / w) as f64 - 2.0);
                (-(x * x + y * y)).exp()
            })
            .collect();
        let total: f64 = heat.iter().sum();
        let heat: Vec<f64> = heat.iter().map(|v| v / total).collect();
        let (mean, var) = heatmap_expectation(&t2(&heat, 1, w * w), w).unwrap();
        let m = mean.to_vec2::<f64>().unwrap();
        assert!(m[0][0].abs() < 1e-15 && m[0][1].abs() < 1e-15);
        assert!(var.to_vec1::<f64>().unwrap()[0] > 0.0);
    }
}
