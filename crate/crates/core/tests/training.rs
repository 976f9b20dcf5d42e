use candle_core::DType;
use prism_core::pipeline::checkpoint::read_checkpoint;
use prism_core::pipeline::config::RunConfig;
use prism_core::pipeline::synth::training_set;
use prism_core::train::{match_quality, prepare_samples, train};
use prism_core::PrismModel;

fn small_config(steps: usize) -> RunConfig {
    let mut config = RunConfig::toy();
    config.steps = steps;
    config.num_pairs = 2;
    config.image_height = 64;
    config.image_width = 64;
    config.seed = 21;
    config
}

fn init_values(config: &RunConfig) -> Vec<(String, Vec<f32>)> {
    let model = PrismModel::new(config.model_config().unwrap(), config.seed, DType::F32).unwrap();
    model
        .store()
        .iter()
        .map(|(n, v)| (n.clone(), v.as_tensor().flatten_all().unwrap().to_vec1().unwrap()))
        .collect()
}

fn assert_bitwise(config: &RunConfig, ckpt: &std::path::Path) {
    let stored = read_checkpoint(ckpt).unwrap();
    for (name, values) in init_values(config) {
        let got = &stored.arrays[&name];
        assert!(
            values.iter().zip(got).all(|(a, b)| a.to_bits() == b.to_bits()),
            "{name} changed"
        );
    }
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(0);
    let entries = training_set(&config).unwrap();
    let outcome = train(&config, &entries, Some(dir.path()), |_| {}).unwrap();
    assert!(outcome.log.is_empty());
    assert_bitwise(&config, &dir.path().join("final.ckpt"));
    assert_eq!(
        read_checkpoint(&dir.path().join("final.ckpt")).unwrap().manifest.step,
        0
    );
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(1);
    config.lr = 0.0;
    let entries = training_set(&config).unwrap();
    let outcome = train(&config, &entries, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(outcome.log.len(), 1);
    assert!(outcome.log[0].total.is_finite());
    assert_bitwise(&config, &dir.path().join("final.ckpt"));

    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,coarse,fine,pruning,total,pairs,skipped");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn losses_fall_over_a_few_steps() {
    let config = small_config(30);
    let entries = training_set(&config).unwrap();
    let outcome = train(&config, &entries, None, |_| {}).unwrap();
    let first = outcome.log[..5].iter().map(|r| r.total).sum::<f64>();
    let last = outcome.log[25..].iter().map(|r| r.total).sum::<f64>();
    assert!(last < first, "total loss did not fall: {first} -> {last}");
}

#[test]
fn match_quality_counts_every_labelled_patch() {
    let config = small_config(0);
    let entries = training_set(&config).unwrap();
    let model = PrismModel::new(config.model_config().unwrap(), 0, DType::F32).unwrap();
    let samples = prepare_samples(&model, &entries).unwrap();
    let q = match_quality(&model, &samples).unwrap();
    let matchable: usize = samples
        .iter()
        .map(|s| {
            s.labels
                .matchable_a
                .iter()
                .chain(&s.labels.matchable_b)
                .filter(|&&m| m)
                .count()
        })
        .sum();
    assert_eq!(q.matchable_total, matchable);
    assert_eq!(
        q.counts.ground_truth,
        samples.iter().map(|s| s.labels.matches.len()).sum::<usize>()
    );
    assert!((0.0..=1.0).contains(&q.mask_recall()));
}
