//! Structural invariants of the pruning stack on random inputs.

use candle_core::DType;
use prism_core::grid::{CoarseGrid, PatchMask};
use prism_core::mpm::{MpmOutput, MpmStack, SideState};
use prism_core::nn::ParamStore;
use prism_core::{PrismError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::Suite;
use crate::util::{bitwise_equal, flat, tensor, uniform};

const PASSES: usize = 100;
const MAX_ATTEMPTS: usize = 1000;

fn monotone(masks: &[PatchMask]) -> bool {
    masks.windows(2).all(|w| w[1].is_subset_of(&w[0]))
}

fn scores_in_range(out: &MpmOutput) -> Result<bool> {
    for s in out.scores_a.iter().chain(&out.scores_b) {
        if !flat(s)?.iter().all(|&v| v > 0.0 && v < 1.0) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn swapped_equal(ab: &MpmOutput, ba: &MpmOutput) -> Result<bool> {
    let mut same = bitwise_equal(&ab.features_a, &ba.features_b)? && bitwise_equal(&ab.features_b, &ba.features_a)?;
    same &= ab.masks_a == ba.masks_b && ab.masks_b == ba.masks_a;
    for (x, y) in ab
        .scores_a
        .iter()
        .zip(&ba.scores_b)
        .chain(ab.scores_b.iter().zip(&ba.scores_a))
    {
        same &= bitwise_equal(x, y)?;
    }
    Ok(same)
}

/// Runs the layers one by one, checking that rows pruned before a layer leave
/// it bitwise unchanged and that the composition reproduces the stack output.
fn layerwise(
    stack: &MpmStack,
    a: SideState,
    b: SideState,
    ga: CoarseGrid,
    gb: CoarseGrid,
    stacked: &MpmOutput,
) -> Result<(bool, bool)> {
    let dtype = a.features.dtype();
    let device = a.features.device().clone();
    let ca = ga.coords_tensor(dtype, &device)?;
    let cb = gb.coords_tensor(dtype, &device)?;
    let (mut a, mut b) = (a, b);
    let mut frozen = true;
    for (l, layer) in stack.layers().iter().enumerate() {
        let out = layer.forward(&a, &b, ga, gb, &ca, &cb, stack.theta_p(), l + 1)?;
        for (before, after) in [(&a, &out.a), (&b, &out.b)] {
            let x = flat(&before.features)?;
            let y = flat(&after.features)?;
            let c = x.len() / before.mask.keep().len();
            for (i, &k) in before.mask.keep().iter().enumerate() {
                if !k {
                    frozen &= x[i * c..(i + 1) * c]
                        .iter()
                        .zip(&y[i * c..(i + 1) * c])
                        .all(|(p, q)| p.to_bits() == q.to_bits());
                }
            }
        }
        a = out.a;
        b = out.b;
    }
    let composed = bitwise_equal(&a.features, &stacked.features_a)?
        && bitwise_equal(&b.features, &stacked.features_b)?
        && &a.mask == stacked.final_mask_a()
        && &b.mask == stacked.final_mask_b();
    Ok((frozen, composed))
}

pub fn suite() -> Result<Suite> {
    let mut suite = Suite::new("pruning stack structural invariants");
    let dim = 32;
    let (ga, gb) = (CoarseGrid::new(8, 8), CoarseGrid::new(8, 12));
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (mut done, mut attempts, mut degenerate, mut pruned_rows) = (0, 0, 0, 0);
    let (mut mono, mut range, mut frozen, mut composed, mut swap) = (0, 0, 0, 0, 0);
    while done < PASSES && attempts < MAX_ATTEMPTS {
        attempts += 1;
        let mut store = ParamStore::new(rng.random(), DType::F32);
        let theta_p = rng.random_range(0.3..0.6);
        let stack = MpmStack::new(&mut store, "mpm", 3, dim, 4, theta_p)?;
        let fa = tensor(
            uniform(&mut rng, ga.len() * dim, -2.0, 2.0),
            &[ga.len(), dim],
            DType::F32,
        )?;
        let fb = tensor(
            uniform(&mut rng, gb.len() * dim, -2.0, 2.0),
            &[gb.len(), dim],
            DType::F32,
        )?;
        let ab = match stack.forward(&fa, &fb, ga, gb) {
            Ok(o) => o,
            Err(PrismError::DegeneratePruning { .. }) => {
                degenerate += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        done += 1;
        pruned_rows += ab.final_mask_a().keep().len() - ab.final_mask_a().count();
        pruned_rows += ab.final_mask_b().keep().len() - ab.final_mask_b().count();
        mono += (monotone(&ab.masks_a) && monotone(&ab.masks_b)) as usize;
        range += scores_in_range(&ab)? as usize;
        let ba = stack.forward(&fb, &fa, gb, ga)?;
        swap += swapped_equal(&ab, &ba)? as usize;
        let side = |f: &candle_core::Tensor, g: CoarseGrid| SideState {
            features: f.clone(),
            mask: PatchMask::ones(g),
        };
        let (fr, co) = layerwise(&stack, side(&fa, ga), side(&fb, gb), ga, gb, &ab)?;
        frozen += fr as usize;
        composed += co as usize;
    }
    let detail =
        |n: usize| format!("{n}/{done} passes ({degenerate} degenerate draws skipped, {pruned_rows} rows pruned)");
    suite.check("forward passes completed", done == PASSES, detail(done));
    suite.check("masks non-increasing across layers", mono == done, detail(mono));
    suite.check("relevance scores in (0, 1)", range == done, detail(range));
    suite.check("pruned rows unchanged by later layers", frozen == done, detail(frozen));
    suite.check(
        "stack equals layer-by-layer composition",
        composed == done,
        detail(composed),
    );
    suite.check("swapping A and B swaps every output", swap == done, detail(swap));

    // No pruning at theta_p = 0, and identical inputs give identical sides.
    let mut store = ParamStore::new(5, DType::F32);
    let stack = MpmStack::new(&mut store, "mpm", 2, dim, 4, 0.0)?;
    let fa = tensor(
        uniform(&mut rng, ga.len() * dim, -2.0, 2.0),
        &[ga.len(), dim],
        DType::F32,
    )?;
    let out = stack.forward(&fa, &fa, ga, ga)?;
    suite.check(
        "theta_p = 0 keeps every patch",
        out.masks_a.iter().chain(&out.masks_b).all(|m| m.count() == ga.len()),
        "all masks full",
    );
    let mut same = bitwise_equal(&out.features_a, &out.features_b)?;
    for (x, y) in out.scores_a.iter().zip(&out.scores_b) {
        same &= bitwise_equal(x, y)?;
    }
    suite.check("A = B gives identical features and scores", same, "bitwise");
    Ok(suite)
}
