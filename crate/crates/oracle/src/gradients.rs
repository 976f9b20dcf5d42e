//! Analytic gradients against central finite differences in `f64`.

use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use prism_core::backbone::{Backbone, BackboneConfig};
use prism_core::grid::CoarseGrid;
use prism_core::matcher::{refine_pairs, weighted_dual_softmax};
use prism_core::mpm::NmiEstimator;
use prism_core::nn::ParamStore;
use prism_core::pipeline::synth::{generate_pair, SyntheticPairSpec};
use prism_core::supervision::{coarse_loss, fine_loss, ground_truth_coarse, pruning_loss, LossWarnings, LossWeights};
use prism_core::{ModelConfig, PrismModel, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::Suite;
use crate::util::{flat, tensor, uniform};

pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are not compared; their relative error is
/// dominated by round-off in the difference quotient.
const NEGLIGIBLE: f64 = 1e-8;

/// Which entries of a parameter to probe.
#[derive(Debug, Clone, Copy)]
enum Pick {
    All,
    /// The `top` entries of largest gradient magnitude plus `random` others.
    Some {
        top: usize,
        random: usize,
    },
}

#[derive(Debug, Default)]
pub struct Tally {
    worst: f64,
    worst_at: String,
    checked: usize,
    negligible: usize,
    /// Probes whose perturbation changed a discrete decision (a pruning mask).
    discontinuous: usize,
    /// Probes that sat within every step of a ReLU kink.
    kinked: usize,
}

impl Tally {
    pub fn detail(&self) -> String {
        format!(
            "worst relative error {:.3e} at {} over {} entries ({} negligible, {} skipped at mask changes, {} at kinks)",
            self.worst, self.worst_at, self.checked, self.negligible, self.discontinuous, self.kinked
        )
    }
}

fn set_values(var: &Var, values: Vec<f64>) -> Result<()> {
    var.set(&Tensor::from_vec(values, var.shape(), var.device())?)?;
    Ok(())
}

fn select(rng: &mut ChaCha8Rng, grad: &[f64], pick: Pick) -> Vec<usize> {
    match pick {
        Pick::All => (0..grad.len()).collect(),
        Pick::Some { top, random } => {
            let mut order: Vec<usize> = (0..grad.len()).collect();
            order.sort_by(|&i, &j| grad[j].abs().total_cmp(&grad[i].abs()));
            let mut out: Vec<usize> = order.iter().copied().take(top).collect();
            for _ in 0..random {
                out.push(rng.random_range(0..grad.len()));
            }
            out.sort_unstable();
            out.dedup();
            out
        }
    }
}

/// Steps tried in turn until the left and right one-sided differences agree.
const STEPS: [f64; 4] = [1e-5, 1e-6, 1e-7, 1e-8];

enum Numeric {
    Value(f64),
    /// The perturbation changed a discrete decision.
    Discontinuous,
    /// Every step straddled a kink of a piecewise-linear activation.
    Kinked,
}

/// Central difference at the smallest step of `STEPS` that is not straddling a
/// kink, judged by agreement of the one-sided differences alone.
fn central_difference(
    var: &Var,
    base: &[f64],
    idx: usize,
    center: f64,
    loss: &dyn Fn() -> Result<Option<f64>>,
) -> Result<Numeric> {
    for step in STEPS {
        let h = step * base[idx].abs().max(1.0);
        let mut v = base.to_vec();
        v[idx] = base[idx] + h;
        set_values(var, v.clone())?;
        let plus = loss()?;
        v[idx] = base[idx] - h;
        set_values(var, v)?;
        let minus = loss()?;
        set_values(var, base.to_vec())?;
        let (Some(plus), Some(minus)) = (plus, minus) else {
            return Ok(Numeric::Discontinuous);
        };
        let right = (plus - center) / h;
        let left = (center - minus) / h;
        let scale = right.abs().max(left.abs());
        if scale < NEGLIGIBLE || (right - left).abs() <= TOLERANCE * scale {
            return Ok(Numeric::Value((plus - minus) / (2.0 * h)));
        }
    }
    Ok(Numeric::Kinked)
}

/// Compares `grads` for each variable with central differences of `loss`,
/// which returns `None` when the perturbed point is not comparable.
fn probe(
    rng: &mut ChaCha8Rng,
    vars: &[(String, Var)],
    grads: &GradStore,
    pick: Pick,
    tally: &mut Tally,
    loss: &dyn Fn() -> Result<Option<f64>>,
) -> Result<()> {
    let Some(center) = loss()? else {
        return Ok(());
    };
    for (name, var) in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => flat(g)?,
            None => vec![0.0; var.elem_count()],
        };
        let base = flat(var.as_tensor())?;
        for idx in select(rng, &analytic, pick) {
            let numeric = match central_difference(var, &base, idx, center, loss)? {
                Numeric::Value(n) => n,
                Numeric::Discontinuous => {
                    tally.discontinuous += 1;
                    continue;
                }
                Numeric::Kinked => {
                    tally.kinked += 1;
                    continue;
                }
            };
            let a = analytic[idx];
            let scale = a.abs().max(numeric.abs());
            if scale < NEGLIGIBLE {
                tally.negligible += 1;
                continue;
            }
            let rel = (a - numeric).abs() / scale;
            if rel > tally.worst {
                tally.worst = rel;
                tally.worst_at = format!("{name}[{idx}]");
            }
            tally.checked += 1;
        }
    }
    Ok(())
}

fn named(vars: &[(&str, &Var)]) -> Vec<(String, Var)> {
    vars.iter().map(|(n, v)| (n.to_string(), (*v).clone())).collect()
}

fn store_vars(store: &ParamStore) -> Vec<(String, Var)> {
    store.iter().map(|(n, v)| (n.clone(), v.clone())).collect()
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn var(values: Vec<f64>, shape: &[usize]) -> Result<Var> {
    Ok(Var::from_tensor(&tensor(values, shape, DType::F64)?)?)
}

fn coarse_case(rng: &mut ChaCha8Rng) -> Result<Tally> {
    let s = var(uniform(rng, 30, -3.0, 3.0), &[5, 6])?;
    let sa = var(uniform(rng, 5, 0.2, 0.9), &[5])?;
    let sb = var(uniform(rng, 6, 0.2, 0.9), &[6])?;
    let matches = [(0, 1), (2, 2), (3, 0), (4, 5)];
    let loss = || -> Result<Tensor> {
        let p = weighted_dual_softmax(s.as_tensor(), sa.as_tensor(), sb.as_tensor())?;
        coarse_loss(&p, &matches, &mut LossWarnings::default())
    };
    let grads = loss()?.backward()?;
    let mut tally = Tally::default();
    let vars = named(&[("S", &s), ("sigma_a", &sa), ("sigma_b", &sb)]);
    probe(rng, &vars, &grads, Pick::All, &mut tally, &|| {
        Ok(Some(scalar(&loss()?)?))
    })?;
    Ok(tally)
}

fn fine_case(rng: &mut ChaCha8Rng) -> Result<Tally> {
    let (c, side) = (8, 16);
    let fa = var(uniform(rng, c * side * side, -1.0, 1.0), &[c, side, side])?;
    let fb = var(uniform(rng, c * side * side, -1.0, 1.0), &[c, side, side])?;
    let grid = CoarseGrid::new(4, 4);
    let pairs = [(5, 5), (5, 6), (6, 9), (9, 10), (10, 5)];
    let targets: Vec<f64> = pairs
        .iter()
        .flat_map(|&(_, j)| {
            let p = grid.anchor_point(j);
            [p[0] + rng.random_range(-3.0..3.0), p[1] + rng.random_range(-3.0..3.0)]
        })
        .collect();
    let targets = tensor(targets, &[pairs.len(), 2], DType::F64)?;
    let phi = tensor(uniform(rng, pairs.len(), 0.5, 2.0), &[pairs.len()], DType::F64)?;
    let loss = || -> Result<Tensor> {
        let r = refine_pairs(&pairs, grid, grid, fa.as_tensor(), fb.as_tensor(), 5)?;
        fine_loss(&r.points_b, &targets, &phi, &mut LossWarnings::default())
    };
    let grads = loss()?.backward()?;
    let mut tally = Tally::default();
    let vars = named(&[("fine_a", &fa), ("fine_b", &fb)]);
    let pick = Pick::Some { top: 25, random: 15 };
    probe(rng, &vars, &grads, pick, &mut tally, &|| Ok(Some(scalar(&loss()?)?)))?;
    Ok(tally)
}

fn pruning_case(rng: &mut ChaCha8Rng) -> Result<Tally> {
    let (n, c) = (12, 8);
    let mut store = ParamStore::new(3, DType::F64);
    let est = NmiEstimator::new(&mut store, "est", c)?;
    let feats: Vec<Var> = (0..4)
        .map(|_| var(uniform(rng, n * c, -1.5, 1.5), &[n, c]))
        .collect::<Result<_>>()?;
    let matchable_a: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
    let matchable_b: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
    let loss = || -> Result<Tensor> {
        let s: Vec<Tensor> = feats
            .iter()
            .map(|f| est.estimate(f.as_tensor()))
            .collect::<Result<_>>()?;
        pruning_loss(
            &s[..2],
            &s[2..],
            &matchable_a,
            &matchable_b,
            &mut LossWarnings::default(),
        )
    };
    let grads = loss()?.backward()?;
    let mut tally = Tally::default();
    let mut vars: Vec<(String, Var)> = feats
        .iter()
        .enumerate()
        .map(|(i, f)| (format!("features{i}"), f.clone()))
        .collect();
    vars.extend(store_vars(&store));
    probe(rng, &vars, &grads, Pick::All, &mut tally, &|| {
        Ok(Some(scalar(&loss()?)?))
    })?;
    Ok(tally)
}

fn backbone_case(rng: &mut ChaCha8Rng) -> Result<Tally> {
    let mut store = ParamStore::new(4, DType::F64);
    let config = BackboneConfig {
        widths: [4, 6, 8],
        blocks_per_stage: 1,
        c_coarse: 8,
        c_fine: 4,
    };
    let backbone = Backbone::new(&mut store, "backbone", &config)?;
    let image = tensor(uniform(rng, 3 * 32 * 32, 0.0, 1.0), &[1, 3, 32, 32], DType::F64)?;
    let wc = tensor(uniform(rng, 8 * 4 * 4, -1.0, 1.0), &[1, 8, 4, 4], DType::F64)?;
    let wf = tensor(uniform(rng, 4 * 16 * 16, -1.0, 1.0), &[1, 4, 16, 16], DType::F64)?;
    let loss = || -> Result<Tensor> {
        let f = backbone.forward(&image)?;
        Ok(((f.coarse * &wc)?.sum_all()? + (f.fine * &wf)?.sum_all()?)?)
    };
    let grads = loss()?.backward()?;
    let mut tally = Tally::default();
    let pick = Pick::Some { top: 2, random: 2 };
    probe(rng, &store_vars(&store), &grads, pick, &mut tally, &|| {
        Ok(Some(scalar(&loss()?)?))
    })?;
    Ok(tally)
}

/// Small model used for the end-to-end check. `min_phi` is large enough that
/// the clamp always applies, which keeps the fine-loss weights constant, as
/// the analytic gradient treats them.
pub fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: [8, 12, 16],
            blocks_per_stage: 1,
            c_coarse: 16,
            c_fine: 8,
        },
        mpm_layers: 2,
        heads: 2,
        // A clamped phi is constant under perturbation, matching its detached
        // treatment in the backward pass. The fine weight undoes the 1/phi^2.
        min_phi: 100.0,
        loss_weights: LossWeights {
            fine: 1e4,
            ..LossWeights::default()
        },
        ..ModelConfig::toy()
    }
}

fn end_to_end_case(rng: &mut ChaCha8Rng) -> Result<Tally> {
    end_to_end_with(rng, end_to_end_config())
}

pub fn end_to_end_with(rng: &mut ChaCha8Rng, config: ModelConfig) -> Result<Tally> {
    let model = PrismModel::new(config, 9, DType::F64)?;
    let pair = generate_pair(&SyntheticPairSpec::procedural(31, 64, 64))?;
    let a = model.image_tensor(&pair.pair.a)?;
    let b = model.image_tensor(&pair.pair.b)?;
    let labels = ground_truth_coarse(&pair.geometry, CoarseGrid::new(8, 8), CoarseGrid::new(8, 8))?;
    let fwd = model.forward(&a, &b)?;
    let base_masks = (fwd.mpm.masks_a.clone(), fwd.mpm.masks_b.clone());
    let (total, _) = model.losses(&fwd, &labels)?;
    let grads = total.backward()?;
    let loss = || -> Result<Option<f64>> {
        let fwd = model.forward(&a, &b)?;
        if (fwd.mpm.masks_a.clone(), fwd.mpm.masks_b.clone()) != base_masks {
            return Ok(None);
        }
        Ok(Some(model.losses(&fwd, &labels)?.1.total))
    };
    let mut tally = Tally::default();
    let pick = Pick::Some { top: 1, random: 1 };
    probe(rng, &store_vars(model.store()), &grads, pick, &mut tally, &loss)?;
    Ok(tally)
}

pub fn suite() -> Result<Suite> {
    let mut suite = Suite::new("gradients vs central finite differences (f64)");
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    type Case = fn(&mut ChaCha8Rng) -> Result<Tally>;
    let cases: [(&str, Case); 5] = [
        ("coarse loss through the weighted dual softmax", coarse_case),
        ("fine loss through window refinement", fine_case),
        ("pruning loss through the relevance estimator", pruning_case),
        ("backbone outputs on a 32x32 image", backbone_case),
        ("end-to-end total loss, 2 pruning layers", end_to_end_case),
    ];
    for (name, case) in cases {
        let tally = case(&mut rng)?;
        suite.check(name, tally.checked > 0 && tally.worst < TOLERANCE, tally.detail());
    }
    let secs = start.elapsed().as_secs_f64();
    suite.check("runtime under 2 minutes", secs < 120.0, format!("{secs:.1} s"));
    Ok(suite)
}
