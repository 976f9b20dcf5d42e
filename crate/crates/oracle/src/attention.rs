//! Attention, assignment and selection against their loop references.

use candle_core::{DType, Tensor};
use prism_core::grid::CoarseGrid;
use prism_core::matcher::{select_coarse, weighted_dual_softmax, ScoreMatrix};
use prism_core::nn::{Conv2d, ParamStore};
use prism_core::rope;
use prism_core::sadpa::{AttentionMode, Sadpa, SadpaConfig};
use prism_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::reference::{self, ConvWeights, SadpaWeights, Side};
use crate::report::Suite;
use crate::util::{flat, max_abs_diff, random_mask, rows, tensor, uniform};

fn conv_weights(conv: &Conv2d) -> Result<ConvWeights> {
    let (c_out, c_in, k, _) = conv.weight().dims4()?;
    Ok(ConvWeights {
        c_in,
        c_out,
        kernel: k,
        weight: flat(conv.weight())?,
        bias: match conv.bias() {
            Some(b) => flat(b)?,
            None => vec![0.0; c_out],
        },
    })
}

/// Copies the parameters of `module` into plain `f64` form.
pub fn sadpa_weights(module: &Sadpa) -> Result<SadpaWeights> {
    let freqs = match module.rope() {
        Some(r) => Some(rows(r.freqs())?.into_iter().map(|f| [f[0], f[1]]).collect()),
        None => None,
    };
    Ok(SadpaWeights {
        heads: module.config().heads,
        q: rows(module.q_proj().weight())?,
        k: rows(module.k_proj().weight())?,
        v: rows(module.v_proj().weight())?,
        levels: [
            conv_weights(module.level_conv(0))?,
            conv_weights(module.level_conv(1))?,
            conv_weights(module.level_conv(2))?,
        ],
        freqs,
    })
}

/// Per-level messages of the module against the brute-force reference; `tol`
/// bounds the largest absolute difference.
pub fn sadpa_suite() -> Result<Suite> {
    let mut suite = Suite::new("scale-aware attention messages vs per-level brute force");
    let grids = [
        (CoarseGrid::new(8, 8), CoarseGrid::new(8, 8)),
        (CoarseGrid::new(4, 8), CoarseGrid::new(8, 12)),
    ];
    for (dtype, tol) in [(DType::F64, 1e-10), (DType::F32, 1e-5)] {
        let mut worst = 0.0f64;
        let mut cases = 0;
        for (case, mode) in [AttentionMode::SelfAttention, AttentionMode::Cross]
            .into_iter()
            .enumerate()
        {
            for seed in 0..6u64 {
                let (grid_s, grid_t) = match mode {
                    AttentionMode::SelfAttention => (grids[0].0, grids[0].0),
                    AttentionMode::Cross => grids[(seed % 2) as usize],
                };
                let mut rng = ChaCha8Rng::seed_from_u64(100 * case as u64 + seed);
                let dim = 16;
                let mut store = ParamStore::new(seed, dtype);
                let module = Sadpa::new(&mut store, "attn", SadpaConfig { dim, heads: 2, mode })?;
                let prune = [0.0, 0.3, 0.7][(seed % 3) as usize];
                let fs = uniform(&mut rng, grid_s.len() * dim, -1.0, 1.0);
                let f_s = tensor(fs, &[grid_s.len(), dim], dtype)?;
                let m_s = random_mask(&mut rng, grid_s, prune)?;
                let (f_t, m_t) = if mode == AttentionMode::SelfAttention {
                    (f_s.clone(), m_s.clone())
                } else {
                    let ft = uniform(&mut rng, grid_t.len() * dim, -1.0, 1.0);
                    (
                        tensor(ft, &[grid_t.len(), dim], dtype)?,
                        random_mask(&mut rng, grid_t, prune)?,
                    )
                };
                let coords = grid_s.coords_tensor(dtype, f_s.device())?;
                let out = module.forward(&f_s, &f_t, &m_s, &m_t, grid_s, grid_t, Some(&coords))?;
                let src_tokens = rows(&f_s)?;
                let dst_tokens = rows(&f_t)?;
                let expected = reference::sadpa_messages(
                    &sadpa_weights(&module)?,
                    &Side {
                        tokens: &src_tokens,
                        mask: m_s.keep(),
                        rows: grid_s.rows,
                        cols: grid_s.cols,
                    },
                    &Side {
                        tokens: &dst_tokens,
                        mask: m_t.keep(),
                        rows: grid_t.rows,
                        cols: grid_t.cols,
                    },
                );
                for (level, msg) in out.messages.iter().enumerate() {
                    worst = worst.max(max_abs_diff(&rows(msg)?, &expected[level]));
                }
                cases += 1;
            }
        }
        suite.within(format!("{dtype:?}, {cases} cases, 3 levels each"), worst, tol);
    }
    Ok(suite)
}

pub fn dual_softmax_suite() -> Result<Suite> {
    let mut suite = Suite::new("weighted dual softmax vs 2x2 closed form");
    let eval = |s: [[f64; 2]; 2], sa: [f64; 2], sb: [f64; 2]| -> Result<Vec<Vec<f64>>> {
        let st = tensor(s.concat(), &[2, 2], DType::F64)?;
        let p = weighted_dual_softmax(&st, &Tensor::new(&sa, st.device())?, &Tensor::new(&sb, st.device())?)?;
        rows(&p)
    };
    let p = eval([[10.0, 0.0], [0.0, 10.0]], [1.0, 1.0], [1.0, 1.0])?;
    suite.check(
        "S=[[10,0],[0,10]] diagonal",
        (p[0][0] - 0.99991).abs() < 1e-5 && (p[1][1] - 0.99991).abs() < 1e-5,
        format!("P00={:.6} P11={:.6}", p[0][0], p[1][1]),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let s = [
            [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)],
            [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)],
        ];
        let sa = [rng.random_range(0.01..1.0), rng.random_range(0.01..1.0)];
        let sb = [rng.random_range(0.01..1.0), rng.random_range(0.01..1.0)];
        let got = eval(s, sa, sb)?;
        let want = reference::dual_softmax_2x2(s, sa, sb);
        worst = worst.max(max_abs_diff(&got, &want.iter().map(|r| r.to_vec()).collect()));
    }
    suite.within("500 random instances", worst, 1e-9);
    Ok(suite)
}

pub fn mnn_suite() -> Result<Suite> {
    let mut suite = Suite::new("mutual nearest neighbour selection vs exhaustive enumeration");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grid = CoarseGrid::new(2, 3);
    let mut mismatches = 0;
    let mut selected = 0;
    for trial in 0..200 {
        // Every fourth matrix is quantized so that ties occur.
        let values: Vec<f64> = (0..36)
            .map(|_| {
                let v: f64 = rng.random();
                if trial % 4 == 3 {
                    (v * 5.0).round() / 5.0
                } else {
                    v
                }
            })
            .collect();
        let theta = rng.random_range(0.0..0.6);
        let mask_a = random_mask(&mut rng, grid, 0.15)?;
        let mask_b = random_mask(&mut rng, grid, 0.15)?;
        let p = ScoreMatrix::new(6, 6, values.clone())?;
        let got: Vec<(usize, usize)> = select_coarse(&p, theta, &mask_a, &mask_b)?
            .iter()
            .map(|m| (m.i, m.j))
            .collect();
        let mat: Vec<Vec<f64>> = values.chunks(6).map(|r| r.to_vec()).collect();
        let want = reference::mnn_enumerate(&mat, theta, mask_a.keep(), mask_b.keep());
        selected += want.len();
        if got != want {
            mismatches += 1;
        }
    }
    suite.check(
        "200 random 6x6 matrices",
        mismatches == 0,
        format!("{mismatches} mismatching matrices, {selected} pairs selected in total"),
    );
    Ok(suite)
}

pub fn rope_suite() -> Result<Suite> {
    let mut suite = Suite::new("rotary embedding relative-position identity");
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut isometry = 0.0f64;
    for trial in 0..100 {
        let d = [2, 4, 8, 16][trial % 4];
        let freqs: Vec<[f64; 2]> = if trial % 2 == 0 {
            rope::initial_frequencies(d, 32.0)
        } else {
            (0..d / 2)
                .map(|_| [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)])
                .collect()
        };
        let q = uniform(&mut rng, d, -1.0, 1.0);
        let k = uniform(&mut rng, d, -1.0, 1.0);
        let p = [rng.random::<f64>(), rng.random::<f64>()];
        let s = [rng.random::<f64>(), rng.random::<f64>()];
        let ft = tensor(freqs.concat(), &[d / 2, 2], DType::F64)?;
        let rot = |v: &[f64], pos: [f64; 2]| -> Result<Vec<f64>> {
            let x = tensor(v.to_vec(), &[1, d], DType::F64)?;
            let c = tensor(pos.to_vec(), &[1, 2], DType::F64)?;
            flat(&rope::rotate(&x, &c, &ft)?)
        };
        let rq = rot(&q, p)?;
        let rk = rot(&k, s)?;
        let lhs = reference::dot(&rq, &rk);
        let rhs = reference::relative_rotation_form(&q, &k, [p[0] - s[0], p[1] - s[1]], &freqs);
        worst = worst.max((lhs - rhs).abs());
        isometry = isometry.max((reference::dot(&rq, &rq) - reference::dot(&q, &q)).abs());
    }
    suite.within("100 random (q, k, coordinate) triples", worst, 1e-10);
    suite.within("norm preservation", isometry, 1e-12);
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_suite_passes() {
        let s = dual_softmax_suite().unwrap();
        assert!(s.passed(), "{s}");
    }

    #[test]
    fn selection_suite_passes() {
        let s = mnn_suite().unwrap();
        assert!(s.passed(), "{s}");
    }
}
