//! Trains the toy preset on a small synthetic set and reports coarse-match
//! quality on the training pairs.
//!
//! `cargo run --release --example overfit -- [steps] [pairs] [lr]`

use std::time::Instant;

use prism_core::pipeline::config::RunConfig;
use prism_core::pipeline::synth::training_set;
use prism_core::train::{match_quality, prepare_samples, train};

fn main() -> prism_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = RunConfig::toy();
    cfg.steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    cfg.num_pairs = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    if let Some(lr) = args.get(3).and_then(|s| s.parse().ok()) {
        cfg.lr = lr;
    }
    cfg.apply_env()?;
    let entries = training_set(&cfg)?;
    let start = Instant::now();
    let every = 25.max(cfg.steps / 40);
    let outcome = train(&cfg, &entries, None, |r| {
        if r.step % every == 0 {
            println!(
                "step {:5} total {:8.4} coarse {:8.4} fine {:8.4} pruning {:8.4} [{:.0}s]",
                r.step,
                r.total,
                r.coarse,
                r.fine,
                r.pruning,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let mut model = outcome.model;
    let samples = prepare_samples(&model, &entries)?;
    for theta_c in [0.0, 0.05, 0.1, 0.2] {
        model.set_theta_c(theta_c);
        let q = match_quality(&model, &samples)?;
        println!(
            "theta_c {theta_c:.2}: precision {:.4} recall {:.4} predicted {} gt {} mask recall {:.4}",
            q.counts.precision(),
            q.counts.recall(),
            q.counts.predicted,
            q.counts.ground_truth,
            q.mask_recall(),
        );
    }
    println!("elapsed {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
