//! Acceptance criteria, one pass/fail line each.
//!
//! Criteria 1 and 2 train the toy preset for 2000 steps on 50 synthetic pairs,
//! which takes roughly a quarter of an hour on one CPU core. The other
//! criteria run the oracle suites.

use std::process::ExitCode;
use std::time::Instant;

use prism_core::pipeline::config::RunConfig;
use prism_core::pipeline::synth::training_set;
use prism_core::train::{match_quality, prepare_samples, train};
use prism_oracle::{attention, geometry, gradients, information, persistence, structure, Suite};

struct Criterion {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    /// Set when the criterion cannot pass as stated; the reason is printed.
    known_failure: Option<&'static str>,
}

impl Criterion {
    fn from_suites(id: usize, title: &'static str, suites: &[Suite]) -> Self {
        let failures: Vec<String> = suites
            .iter()
            .flat_map(|s| s.failures().map(|c| c.name.clone()))
            .collect();
        let checks: usize = suites.iter().map(|s| s.checks.len()).sum();
        Self {
            id,
            title,
            passed: failures.is_empty(),
            detail: if failures.is_empty() {
                format!("{checks} checks passed")
            } else {
                format!("failed: {}", failures.join("; "))
            },
            known_failure: None,
        }
    }
}

fn overfit() -> prism_core::Result<(Criterion, Criterion)> {
    let config = RunConfig::toy();
    let start = Instant::now();
    let entries = training_set(&config)?;
    let outcome = train(&config, &entries, None, |_| {})?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let samples = prepare_samples(&outcome.model, &entries)?;
    let q = match_quality(&outcome.model, &samples)?;
    let (precision, recall) = (q.counts.precision(), q.counts.recall());
    let within_time = minutes <= 30.0;
    let learning = Criterion {
        id: 1,
        title: "toy overfit: precision >= 0.8, recall >= 0.5, <= 2000 steps, <= 30 min",
        passed: precision >= 0.8 && recall >= 0.5 && config.steps <= 2000 && within_time,
        detail: format!(
            "precision {precision:.4}, recall {recall:.4} ({} predicted, {} ground truth) after {} steps on {} pairs in {minutes:.1} min",
            q.counts.predicted, q.counts.ground_truth, config.steps, config.num_pairs
        ),
        known_failure: None,
    };
    let mask = Criterion {
        id: 2,
        title: "mask recall of matchable patches >= 0.9",
        passed: q.mask_recall() >= 0.9,
        detail: format!(
            "{:.4} ({} of {} kept)",
            q.mask_recall(),
            q.matchable_kept,
            q.matchable_total
        ),
        known_failure: None,
    };
    Ok((learning, mask))
}

fn run() -> prism_core::Result<Vec<(Criterion, Vec<Suite>)>> {
    let mut out = Vec::new();
    let (learning, mask) = overfit()?;
    out.push((learning, vec![]));
    out.push((mask, vec![]));

    let grads = vec![gradients::suite()?];
    out.push((Criterion::from_suites(3, "gradient suite", &grads), grads));

    let oracle = vec![
        attention::sadpa_suite()?,
        attention::dual_softmax_suite()?,
        attention::mnn_suite()?,
        attention::rope_suite()?,
    ];
    out.push((
        Criterion::from_suites(4, "attention and matching oracles", &oracle),
        oracle,
    ));

    let mi = vec![information::suite()?];
    let mut nmi = Criterion::from_suites(5, "mutual information oracle", &mi);
    let only_stated: bool = mi[0].failures().all(|c| c.name == information::STATED_CHECK);
    if !nmi.passed && only_stated {
        nmi.known_failure = Some("the stated 0.278059 differs from the exact 0.2780719 by more than its tolerance");
    }
    out.push((nmi, mi));

    let s = vec![structure::suite()?];
    out.push((Criterion::from_suites(6, "structural invariants", &s), s));
    let g = vec![geometry::suite()?];
    out.push((Criterion::from_suites(7, "geometry suite", &g), g));
    let p = vec![persistence::suite()?];
    out.push((Criterion::from_suites(8, "determinism and persistence", &p), p));
    Ok(out)
}

fn main() -> ExitCode {
    let results = match run() {
        Ok(r) => r,
        Err(e) => {
            println!("acceptance run aborted: {e}");
            return ExitCode::FAILURE;
        }
    };
    for (_, suites) in &results {
        for suite in suites {
            print!("{suite}");
        }
    }
    println!();
    let mut unexpected = 0;
    for (c, _) in &results {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("criterion {} [{verdict}] {}: {}", c.id, c.title, c.detail);
        if !c.passed {
            match c.known_failure {
                Some(reason) => println!("    known failure: {reason}"),
                None => unexpected += 1,
            }
        }
    }
    let passed = results.iter().filter(|(c, _)| c.passed).count();
    println!("{passed}/{} criteria passed", results.len());
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
