//! Optimization loop over the total loss.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PrismError, Result};
use crate::eval::metrics::{mask_retention, MatchCounts};
use crate::grid::CoarseGrid;
use crate::model::PrismModel;
use crate::pipeline::checkpoint::save_checkpoint;
use crate::pipeline::config::RunConfig;
use crate::pipeline::dataset::DatasetEntry;
use crate::supervision::{ground_truth_coarse, LossWarnings, SupervisionLabels};

/// A pair converted to tensors with its coarse supervision precomputed.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub name: String,
    pub a: Tensor,
    pub b: Tensor,
    pub labels: SupervisionLabels,
}

pub fn prepare_samples(model: &PrismModel, entries: &[DatasetEntry]) -> Result<Vec<TrainSample>> {
    entries
        .iter()
        .map(|e| {
            let a = model.image_tensor(&e.pair.a)?;
            let b = model.image_tensor(&e.pair.b)?;
            let grid_a = CoarseGrid::for_image(e.pair.a.height(), e.pair.a.width());
            let grid_b = CoarseGrid::for_image(e.pair.b.height(), e.pair.b.width());
            Ok(TrainSample {
                name: e.pair.name.clone(),
                a,
                b,
                labels: ground_truth_coarse(&e.geometry, grid_a, grid_b)?,
            })
        })
        .collect()
}

/// Coarse-match quality and mask retention over a set of labelled pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MatchQuality {
    pub counts: MatchCounts,
    /// Ground-truth-matchable patches kept by the final masks, both sides.
    pub matchable_kept: usize,
    pub matchable_total: usize,
}

impl MatchQuality {
    /// 1 when no patch was matchable.
    pub fn mask_recall(&self) -> f64 {
        if self.matchable_total == 0 {
            1.0
        } else {
            self.matchable_kept as f64 / self.matchable_total as f64
        }
    }
}

/// Runs `model` on every sample and scores its coarse matches and final masks
/// against the precomputed labels.
pub fn match_quality(model: &PrismModel, samples: &[TrainSample]) -> Result<MatchQuality> {
    let mut q = MatchQuality::default();
    for s in samples {
        let fwd = model.forward(&s.a, &s.b)?;
        let matches = model.matches_from(&fwd)?;
        q.counts.add(&MatchCounts::of(&matches.coarse, &s.labels.matches));
        for (mask, matchable) in [
            (fwd.mpm.final_mask_a(), &s.labels.matchable_a),
            (fwd.mpm.final_mask_b(), &s.labels.matchable_b),
        ] {
            let (kept, total) = mask_retention(mask, matchable)?;
            q.matchable_kept += kept;
            q.matchable_total += total;
        }
    }
    Ok(q)
}

/// Loss values recorded before the update of `step`, averaged over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub coarse: f64,
    pub fine: f64,
    pub pruning: f64,
    pub total: f64,
    pub pairs: usize,
    /// Pairs dropped because pruning removed every patch of one image.
    pub skipped: usize,
    pub warnings: LossWarnings,
}

/// Learning-rate schedule over the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to `floor * base` at `total` steps.
    Cosine {
        total: usize,
        floor: f64,
    },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize) -> f64 {
        match *self {
            Self::Constant => base,
            Self::Cosine { total, floor } => {
                let t = (step as f64 / total.max(1) as f64).min(1.0);
                base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
            }
        }
    }
}

pub struct Trainer {
    model: PrismModel,
    optimizer: AdamW,
    base_lr: f64,
    schedule: LrSchedule,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    step: usize,
}

impl Trainer {
    pub fn new(
        model: PrismModel,
        lr: f64,
        weight_decay: f64,
        batch: usize,
        seed: u64,
        schedule: LrSchedule,
    ) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            weight_decay,
            ..Default::default()
        };
        let optimizer = AdamW::new(model.store().all_vars(), params)?;
        Ok(Self {
            model,
            optimizer,
            base_lr: lr,
            schedule,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a),
            order: Vec::new(),
            cursor: 0,
            batch: batch.max(1),
            step: 0,
        })
    }

    pub fn model(&self) -> &PrismModel {
        &self.model
    }

    pub fn into_model(self) -> PrismModel {
        self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Next batch of sample indices; epochs are reshuffled from the seeded stream.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        (0..self.batch.min(n))
            .map(|_| {
                if self.cursor >= self.order.len() {
                    self.order = (0..n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// One optimization step on the next batch.
    pub fn step(&mut self, samples: &[TrainSample]) -> Result<StepRecord> {
        if samples.is_empty() {
            return Err(PrismError::InvalidInput("no training samples".into()));
        }
        let idx = self.next_batch(samples.len());
        let mut record = StepRecord {
            step: self.step,
            coarse: 0.0,
            fine: 0.0,
            pruning: 0.0,
            total: 0.0,
            pairs: 0,
            skipped: 0,
            warnings: LossWarnings::default(),
        };
        let mut total: Option<Tensor> = None;
        for &i in &idx {
            let s = &samples[i];
            let fwd = match self.model.forward(&s.a, &s.b) {
                Ok(f) => f,
                Err(PrismError::DegeneratePruning { image, layer }) => {
                    log::warn!(
                        "step {}: pair {} fully pruned in image {image} at layer {layer}",
                        self.step,
                        s.name
                    );
                    record.skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let (loss, bundle) = self.model.losses(&fwd, &s.labels)?;
            if !bundle.total.is_finite() {
                return Err(PrismError::NonFiniteLoss {
                    step: self.step,
                    diagnostics: format!(
                        "pair {}: coarse={} fine={} pruning={} total={} gt_matches={} phi_len={}",
                        s.name,
                        bundle.coarse,
                        bundle.fine,
                        bundle.pruning,
                        bundle.total,
                        s.labels.matches.len(),
                        bundle.phi.len()
                    ),
                });
            }
            record.coarse += bundle.coarse;
            record.fine += bundle.fine;
            record.pruning += bundle.pruning;
            record.total += bundle.total;
            record.pairs += 1;
            record.warnings.merge(&bundle.warnings);
            total = Some(match total {
                None => loss,
                Some(t) => (t + loss)?,
            });
        }
        if let Some(total) = total {
            let n = record.pairs as f64;
            record.coarse /= n;
            record.fine /= n;
            record.pruning /= n;
            record.total /= n;
            self.optimizer
                .set_learning_rate(self.schedule.rate(self.base_lr, self.step));
            self.optimizer.backward_step(&(total / n)?)?;
        }
        self.step += 1;
        Ok(record)
    }
}

pub struct TrainOutcome {
    pub model: PrismModel,
    pub log: Vec<StepRecord>,
}

/// Builds a model from `config`, runs `config.steps` steps and, when `out_dir`
/// is given, writes `metrics.csv`, periodic checkpoints and `final.ckpt`.
pub fn train(
    config: &RunConfig,
    entries: &[DatasetEntry],
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = PrismModel::new(config.model_config()?, config.seed, DType::F32)?;
    let samples = prepare_samples(&model, entries)?;
    let schedule = if config.lr_decay {
        LrSchedule::Cosine {
            total: config.steps,
            floor: 0.05,
        }
    } else {
        LrSchedule::Constant
    };
    let mut trainer = Trainer::new(
        model,
        config.lr,
        config.weight_decay,
        config.batch,
        config.seed,
        schedule,
    )?;
    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.txt"), config.to_text())?;
            let mut f = fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "step,coarse,fine,pruning,total,pairs,skipped")?;
            Some(f)
        }
        None => None,
    };
    let mut log = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let rec = match trainer.step(&samples) {
            Ok(r) => r,
            Err(e @ PrismError::NonFiniteLoss { .. }) => {
                if let Some(dir) = out_dir {
                    fs::write(dir.join("diagnostics.txt"), format!("{e}\n"))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some(f) = metrics.as_mut() {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                rec.step, rec.coarse, rec.fine, rec.pruning, rec.total, rec.pairs, rec.skipped
            )?;
        }
        on_step(&rec);
        let done = trainer.step_count();
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.steps {
                save_checkpoint(
                    &dir.join(format!("step_{done:06}.ckpt")),
                    trainer.model(),
                    config,
                    done as u64,
                )?;
            }
        }
        log.push(rec);
    }
    if let Some(dir) = out_dir {
        save_checkpoint(
            &dir.join("final.ckpt"),
            trainer.model(),
            config,
            trainer.step_count() as u64,
        )?;
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        log,
    })
}
