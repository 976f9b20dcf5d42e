//! Command-line front end: training, matching, evaluation and self-checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use prism_core::eval::geometry::RansacParams;
use prism_core::eval::report::write_report;
use prism_core::eval::run::{
    evaluate_homography, evaluate_pose, evaluate_precomputed_poses, match_any_size, read_precomputed_poses, Evaluation,
};
use prism_core::image::{save_gray, ImageTensor};
use prism_core::matcher::format_matches;
use prism_core::pipeline::checkpoint::load_model;
use prism_core::pipeline::config::RunConfig;
use prism_core::pipeline::dataset::{load_dataset, write_pair, DatasetEntry};
use prism_core::pipeline::synth::{generate_pair, pair_seed, training_set, BaseImage, SyntheticPairSpec};
use prism_core::train::train;
use prism_core::PrismModel;

#[derive(Parser)]
#[command(
    name = "prism",
    version,
    about = "Detector-free image matching with progressive patch pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key=value config; writes metrics.csv and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match two images and write `x_A y_A x_B y_B confidence` lines.
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        theta_c: Option<f64>,
        #[arg(long)]
        theta_p: Option<f64>,
    },
    /// Corner-error AUC on a dataset of homography pairs.
    EvalHomography {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "3,5,10")]
        thresholds: Vec<f64>,
        #[arg(long, default_value = "report.txt")]
        report: PathBuf,
        /// Abort on the first malformed pair instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
    /// Pose-error AUC on a dataset of pose+depth pairs.
    EvalPose {
        /// Required unless `--precomputed` is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        thresholds: Vec<f64>,
        #[arg(long, default_value = "pose_report.txt")]
        report: PathBuf,
        /// Score poses from a file (`name r11 .. r33 t1 t2 t3` per line) instead of matching.
        #[arg(long)]
        precomputed: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
    /// Write per-layer pruning masks as grayscale PNGs (255 kept, 0 pruned).
    ExportMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every oracle suite.
    Selftest,
    /// Write a seeded synthetic homography dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        /// Base images, used in turn; procedural textures when absent.
        #[arg(long)]
        base: Vec<PathBuf>,
    },
}

fn load(checkpoint: &Path) -> Result<PrismModel> {
    let (model, ckpt) =
        load_model(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    log::info!("loaded {} (step {})", checkpoint.display(), ckpt.manifest.step);
    Ok(model)
}

fn load_image(path: &Path) -> Result<ImageTensor> {
    ImageTensor::load_png(path).with_context(|| format!("reading {}", path.display()))
}

fn run_train(config: &Path, out: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(config).with_context(|| format!("reading config {}", config.display()))?;
    cfg.apply_env()?;
    let entries: Vec<DatasetEntry> = match &cfg.dataset {
        Some(root) => load_dataset(root, false)?.collect::<prism_core::Result<_>>()?,
        None => training_set(&cfg)?,
    };
    if entries.is_empty() {
        bail!("no training pairs");
    }
    log::info!(
        "training {} preset on {} pairs for {} steps",
        cfg.preset,
        entries.len(),
        cfg.steps
    );
    let every = cfg.log_every.max(1);
    train(&cfg, &entries, Some(out), |r| {
        if r.step % every == 0 {
            println!(
                "step {:6}  total {:.4}  coarse {:.4}  fine {:.4}  pruning {:.4}",
                r.step, r.total, r.coarse, r.fine, r.pruning
            );
        }
    })?;
    println!("wrote {}", out.join("final.ckpt").display());
    Ok(())
}

fn run_match(
    checkpoint: &Path,
    image_a: &Path,
    image_b: &Path,
    out: &Path,
    theta_c: Option<f64>,
    theta_p: Option<f64>,
) -> Result<()> {
    let mut model = load(checkpoint)?;
    if let Some(t) = theta_c {
        model.set_theta_c(t);
    }
    if let Some(t) = theta_p {
        model.set_theta_p(t);
    }
    let m = match_any_size(&model, &load_image(image_a)?, &load_image(image_b)?)?;
    std::fs::write(out, format_matches(&m.matches)).with_context(|| format!("writing {}", out.display()))?;
    println!("{} matches written to {}", m.matches.len(), out.display());
    Ok(())
}

fn print_evaluation(eval: &Evaluation, table: &str) {
    for p in &eval.pairs {
        log::info!("{}: {} matches, error {:.3}", p.name, p.matches, p.error);
    }
    print!("{table}");
}

fn run_export_masks(checkpoint: &Path, image_a: &Path, image_b: &Path, out: &Path) -> Result<()> {
    let model = load(checkpoint)?;
    let m = match_any_size(&model, &load_image(image_a)?, &load_image(image_b)?)?;
    std::fs::create_dir_all(out)?;
    let mpm = &m.forward.mpm;
    let mut written = 0;
    for (side, masks) in [("a", &mpm.masks_a), ("b", &mpm.masks_b)] {
        // Index 0 is the all-ones mask entering the first layer.
        for (layer, mask) in masks.iter().enumerate().skip(1) {
            let grid = mask.grid();
            let pixels = mask.keep().iter().map(|&k| if k { 255 } else { 0 }).collect();
            save_gray(
                &out.join(format!("{side}_layer{layer}.png")),
                grid.cols,
                grid.rows,
                pixels,
            )?;
            written += 1;
        }
    }
    println!("{written} masks written to {}", out.display());
    Ok(())
}

fn run_selftest() -> Result<bool> {
    let suites = prism_oracle::run_all()?;
    let mut unexpected = 0;
    for suite in &suites {
        print!("{suite}");
        for c in suite.failures() {
            if c.name == prism_oracle::information::STATED_CHECK {
                println!("note: the published NMI value disagrees with the closed form; this failure is expected");
            } else {
                unexpected += 1;
            }
        }
    }
    Ok(unexpected == 0)
}

fn run_synth(out: &Path, pairs: usize, seed: u64, height: usize, width: usize, base: &[PathBuf]) -> Result<()> {
    let bases: Vec<ImageTensor> = base.iter().map(|p| load_image(p)).collect::<Result<_>>()?;
    let template = SyntheticPairSpec::procedural(seed, height, width);
    for i in 0..pairs {
        let mut spec = SyntheticPairSpec {
            seed: pair_seed(seed, i),
            ..template.clone()
        };
        if !bases.is_empty() {
            spec.base = BaseImage::Image(bases[i % bases.len()].clone());
        }
        let p = generate_pair(&spec)?;
        write_pair(
            out,
            &DatasetEntry {
                pair: p.pair,
                geometry: p.geometry,
            },
        )?;
    }
    println!("{pairs} pairs written to {}", out.join("pairs").display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, out } => run_train(&config, &out)?,
        Command::Match {
            checkpoint,
            image_a,
            image_b,
            out,
            theta_c,
            theta_p,
        } => run_match(&checkpoint, &image_a, &image_b, &out, theta_c, theta_p)?,
        Command::EvalHomography {
            checkpoint,
            dataset,
            thresholds,
            report,
            strict,
        } => {
            let model = load(&checkpoint)?;
            let eval = evaluate_homography(
                &model,
                load_dataset(&dataset, strict)?,
                &thresholds,
                &RansacParams::default(),
            )?;
            let table = write_report(&report, "Homography estimation", "px", &eval.curve)?;
            print_evaluation(&eval, &table);
        }
        Command::EvalPose {
            checkpoint,
            dataset,
            thresholds,
            report,
            precomputed,
            strict,
        } => {
            let entries = load_dataset(&dataset, strict)?;
            let eval = match (precomputed, checkpoint) {
                (Some(path), _) => evaluate_precomputed_poses(&read_precomputed_poses(&path)?, entries, &thresholds)?,
                (None, Some(ckpt)) => evaluate_pose(&load(&ckpt)?, entries, &thresholds, &RansacParams::default())?,
                (None, None) => bail!("eval-pose needs --checkpoint or --precomputed"),
            };
            let table = write_report(&report, "Relative pose estimation", "deg", &eval.curve)?;
            print_evaluation(&eval, &table);
        }
        Command::ExportMasks {
            checkpoint,
            image_a,
            image_b,
            out,
        } => run_export_masks(&checkpoint, &image_a, &image_b, &out)?,
        Command::Selftest => return run_selftest(),
        Command::Synth {
            out,
            pairs,
            seed,
            height,
            width,
            base,
        } => run_synth(&out, pairs, seed, height, width, &base)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
