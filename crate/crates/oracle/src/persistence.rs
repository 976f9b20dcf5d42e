//! Seeded reproducibility of training and bitwise checkpoint round trips.

use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use prism_core::pipeline::checkpoint::{load_model, save_checkpoint};
use prism_core::pipeline::config::RunConfig;
use prism_core::pipeline::synth::training_set;
use prism_core::train::{prepare_samples, train, StepRecord};
use prism_core::Result;

use crate::report::Suite;
use crate::util::{bitwise_equal, flat};

fn same_bits(a: &StepRecord, b: &StepRecord) -> bool {
    [
        (a.coarse, b.coarse),
        (a.fine, b.fine),
        (a.pruning, b.pruning),
        (a.total, b.total),
    ]
    .iter()
    .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn scratch_dir() -> Result<PathBuf> {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos());
    let dir = std::env::temp_dir().join(format!("prism-oracle-{}-{nanos}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn suite() -> Result<Suite> {
    let mut suite = Suite::new("determinism and persistence");
    let mut config = RunConfig::toy();
    config.steps = 11;
    config.num_pairs = 4;
    config.seed = 1234;
    let entries = training_set(&config)?;
    let first = train(&config, &entries, None, |_| {})?;
    let second = train(&config, &entries, None, |_| {})?;
    for step in [0, 10] {
        let (a, b) = (&first.log[step], &second.log[step]);
        suite.check(
            format!("step {step} losses reproduce bitwise"),
            same_bits(a, b),
            format!("total {:.17e} vs {:.17e}", a.total, b.total),
        );
    }

    let dir = scratch_dir()?;
    let path = dir.join("model.ckpt");
    save_checkpoint(&path, &first.model, &config, 11)?;
    let (loaded, ckpt) = load_model(&path)?;
    let mut arrays_equal = ckpt.manifest.step == 11 && ckpt.manifest.config == config;
    for (name, var) in first.model.store().iter() {
        let Some(restored) = loaded.store().get(name) else {
            arrays_equal = false;
            continue;
        };
        arrays_equal &= bitwise_equal(var.as_tensor(), restored.as_tensor())?;
    }
    arrays_equal &= first.model.store().len() == loaded.store().len();
    suite.check(
        "every parameter restored bitwise",
        arrays_equal,
        format!("{} arrays", loaded.store().len()),
    );

    let samples = prepare_samples(&first.model, &entries[..1])?;
    let before = first.model.forward(&samples[0].a, &samples[0].b)?;
    let after = loaded.forward(&samples[0].a, &samples[0].b)?;
    let same = bitwise_equal(&before.assignment, &after.assignment)?;
    let max_p = flat(&after.assignment)?.into_iter().fold(0.0, f64::max);
    suite.check(
        "restored model reproduces the assignment matrix",
        same,
        format!("max P {max_p:.4}"),
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(suite)
}
