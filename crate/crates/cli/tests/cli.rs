use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prism_core::image::ImageTensor;

fn prism(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prism"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = prism(args);
    assert!(
        out.status.success(),
        "prism {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a pose pair reusing the images of `source`, with cameras related by
/// a pure sideways translation.
fn write_pose_pair(root: &Path, name: &str, source: &Path) -> PathBuf {
    let dir = root.join("pairs").join(name);
    std::fs::create_dir_all(&dir).unwrap();
    for f in ["a.png", "b.png"] {
        std::fs::copy(source.join(f), dir.join(f)).unwrap();
    }
    let k = "50 0 32\n0 50 32\n0 0 1\n";
    let r = "1 0 0\n0 1 0\n0 0 1\n";
    let pose = format!("K_A\n{k}R_A\n{r}t_A\n0 0 0\nK_B\n{k}R_B\n{r}t_B\n1 0 0\n");
    std::fs::write(dir.join("gt.pose"), pose).unwrap();
    let mut depth = Vec::new();
    for v in [64u32, 64, 1] {
        depth.extend_from_slice(&v.to_le_bytes());
    }
    for _ in 0..64 * 64 {
        depth.extend_from_slice(&2.0f32.to_le_bytes());
    }
    for f in ["depth_a.bin", "depth_b.bin"] {
        std::fs::write(dir.join(f), &depth).unwrap();
    }
    dir
}

#[test]
fn synth_train_match_evaluate_export() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--pairs",
        "2",
        "--seed",
        "3",
        "--height",
        "64",
        "--width",
        "64",
    ]);
    let pairs: Vec<PathBuf> = std::fs::read_dir(data.join("pairs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(pairs.len(), 2);
    let pair = &pairs[0];
    assert!(pair.join("gt.homog").is_file());

    let config = tmp.path().join("train.cfg");
    std::fs::write(
        &config,
        format!(
            "preset = toy\nsteps = 2\nimage_size = 64\nlog_every = 1\ndataset = {}\n",
            data.display()
        ),
    )
    .unwrap();
    let run = tmp.path().join("run");
    let stdout = ok(&["train", "--config", s(&config), "--out", s(&run)]);
    assert!(stdout.contains("step"), "{stdout}");
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.is_file());
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let matches = tmp.path().join("matches.txt");
    ok(&[
        "match",
        "--checkpoint",
        s(&ckpt),
        "--image-a",
        s(&pair.join("a.png")),
        "--image-b",
        s(&pair.join("b.png")),
        "--out",
        s(&matches),
        "--theta-c",
        "0",
    ]);
    for line in std::fs::read_to_string(&matches).unwrap().lines() {
        let v: Vec<f64> = line.split_whitespace().map(|t| t.parse().unwrap()).collect();
        assert_eq!(v.len(), 5, "{line}");
        assert!(v[..4].iter().all(|&c| (0.0..=64.0).contains(&c)), "{line}");
        assert!((0.0..=1.0).contains(&v[4]), "{line}");
    }

    let report = tmp.path().join("eval").join("report.txt");
    let table = ok(&[
        "eval-homography",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&data),
        "--thresholds",
        "3,5,10",
        "--report",
        s(&report),
    ]);
    let written = std::fs::read_to_string(&report).unwrap();
    assert_eq!(table, written);
    assert!(written.contains("pairs: 2"));
    for t in ["3px", "5px", "10px"] {
        assert!(written.contains(t), "{written}");
    }
    assert!(report.with_extension("png").is_file());

    let masks = tmp.path().join("masks");
    ok(&[
        "export-masks",
        "--checkpoint",
        s(&ckpt),
        "--image-a",
        s(&pair.join("a.png")),
        "--image-b",
        s(&pair.join("b.png")),
        "--out",
        s(&masks),
    ]);
    for side in ["a", "b"] {
        let m = ImageTensor::load_png(&masks.join(format!("{side}_layer1.png"))).unwrap();
        assert_eq!((m.height(), m.width()), (8, 8));
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn precomputed_poses_are_scored_against_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = tmp.path().join("synth");
    ok(&[
        "synth",
        "--out",
        s(&synth),
        "--pairs",
        "1",
        "--height",
        "64",
        "--width",
        "64",
    ]);
    let source = std::fs::read_dir(synth.join("pairs"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let data = tmp.path().join("poses");
    write_pose_pair(&data, "exact", &source);
    write_pose_pair(&data, "missing", &source);
    let poses = tmp.path().join("poses.txt");
    std::fs::write(&poses, "exact 1 0 0 0 1 0 0 0 1 -2 0 0\n").unwrap();
    let report = tmp.path().join("pose_report.txt");
    ok(&[
        "eval-pose",
        "--dataset",
        s(&data),
        "--precomputed",
        s(&poses),
        "--thresholds",
        "5,10,20",
        "--report",
        s(&report),
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("pairs: 2"), "{text}");
    assert!(text.contains("failed estimates: 1"), "{text}");
    // One exact pose and one failure: every AUC is one half.
    let rows: Vec<&str> = text.lines().filter(|l| l.contains("deg")).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.trim_end().ends_with("50.00")), "{text}");
}

#[test]
fn errors_are_reported_with_a_failing_status() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.ckpt");
    let img = tmp.path().join("x.png");
    let out = prism(&[
        "match",
        "--checkpoint",
        s(&missing),
        "--image-a",
        s(&img),
        "--image-b",
        s(&img),
        "--out",
        "m.txt",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));

    let out = prism(&["eval-pose", "--dataset", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--precomputed"));

    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = prism(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn selftest_passes_apart_from_the_documented_discrepancy() {
    let stdout = ok(&["selftest"]);
    assert!(stdout.contains("expected"), "{stdout}");
}
