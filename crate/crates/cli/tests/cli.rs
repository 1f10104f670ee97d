use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tokprune::io::{read_f32, read_meta, read_scores_csv, write_f32, MatrixMeta};
use tokprune::PruneMask;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokprune"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

#[test]
fn simulate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "sim.json");
    fs::write(
        &cfg,
        r#"{"seed": 42, "target_flops": 4.1e12, "synthesis": {"grid": 8}, "schedule": {"total_steps": 20, "tau": 6}}"#,
    )
    .unwrap();
    let (a, b) = (path(dir.path(), "a.json"), path(dir.path(), "b.json"));
    ok(&["simulate", "--config", &cfg, "--out", &a]);
    ok(&["simulate", "--config", &cfg, "--out", &b]);
    let (ra, rb) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(ra, rb);
    let report: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(report["steps"].as_array().unwrap().len(), 20);
}

#[test]
fn exit_codes() {
    let out = ok(&["profile", "--ratio", "0"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let full = report["full_flops"].as_f64().unwrap();
    assert!((full / 6.7e12 - 1.0).abs() <= 0.1, "{full}");

    assert_eq!(run(&["profile", "--target-tflops", "2.9"]).status.code(), Some(3));
    assert_eq!(run(&["profile", "--ratio", "1.2"]).status.code(), Some(2));
    assert_eq!(run(&["schedule", "--tau", "51"]).status.code(), Some(2));
    assert_eq!(
        run(&["mask", "--random", "--total", "10", "--seed", "1", "--ratio", "-0.1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["simulate", "--config", "/nonexistent/sim.json", "--out", "/dev/null"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn score_mask_recover_chain() {
    let dir = tempfile::tempdir().unwrap();
    let map = path(dir.path(), "map.f32");
    write_f32(Path::new(&map), &MatrixMeta::new(2, 2, 1), &[0.8, 0.2, 0.6, 0.4]).unwrap();

    let scores = path(dir.path(), "scores.csv");
    ok(&["score", "--map", &map, "--epsilon", "1e-12", "--out", &scores]);
    let s = read_scores_csv(Path::new(&scores)).unwrap();
    // The map is stored as f32, which moves the fixed point by ~2e-9.
    assert!((s[0] - 0.75).abs() < 1e-7 && (s[1] - 0.25).abs() < 1e-7, "{s:?}");
    for mapper in ["entropy", "hardclip", "softclip", "power"] {
        ok(&["score", "--map", &map, "--mapper", mapper, "--out", &scores]);
    }

    ok(&["score", "--map", &map, "--out", &scores]);
    let mask_path = path(dir.path(), "mask.json");
    ok(&["mask", "--scores", &scores, "--ratio", "0.5", "--out", &mask_path]);
    let mask: PruneMask = serde_json::from_str(&fs::read_to_string(&mask_path).unwrap()).unwrap();
    assert_eq!(mask.retained(), &[0]);

    let pruned = path(dir.path(), "pruned.f32");
    let meta = MatrixMeta {
        height: Some(1),
        width: Some(2),
        ..MatrixMeta::new(1, 3, 1)
    };
    write_f32(Path::new(&pruned), &meta, &[1.0, 2.0, 3.0]).unwrap();
    let full = path(dir.path(), "full.f32");
    for (method, expected) in [
        ("zeropad", [1.0, 2.0, 3.0, 0.0, 0.0, 0.0]),
        ("simcopy", [1.0, 2.0, 3.0, 1.0, 2.0, 3.0]),
    ] {
        ok(&[
            "recover", "--method", method, "--pruned", &pruned, "--mask", &mask_path, "--attn", &map, "--out", &full,
        ]);
        let out_meta = read_meta(&dir.path().join("full.json")).unwrap();
        assert_eq!((out_meta.rows, out_meta.cols, out_meta.height), (2, 3, Some(1)));
        assert_eq!(read_f32(Path::new(&full), &out_meta).unwrap(), expected);
    }
}

#[test]
fn random_masks_repeat() {
    let a = ok(&["mask", "--random", "--total", "100", "--ratio", "0.63", "--seed", "7"]);
    let b = ok(&["mask", "--random", "--total", "100", "--ratio", "0.63", "--seed", "7"]);
    assert_eq!(a.stdout, b.stdout);
    let mask: PruneMask = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(mask.retained().len(), 37);
}

#[test]
fn schedule_and_tau() {
    let dir = tempfile::tempdir().unwrap();
    let trace = path(dir.path(), "v.csv");
    let text: String = (0..50)
        .map(|t| format!("{}\n", if t < 15 { 1e-7 * (t + 1) as f64 } else { 2e-5 }))
        .collect();
    fs::write(&trace, text).unwrap();
    let out = ok(&[
        "schedule",
        "recommend-tau",
        "--variances",
        &trace,
        "--threshold",
        "1e-5",
    ]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "15");

    let out = ok(&["schedule", "--tau", "15", "--policy", "FL"]);
    let sched: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let steps = sched["per_step"].as_array().unwrap();
    assert_eq!(steps.len(), 50);
    assert_eq!(steps[14]["exempt"].as_array().unwrap().len(), 4);
    assert!(steps[15]["exempt"].as_array().unwrap().is_empty());
}

#[test]
fn recovery_benchmark_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "bench.json");
    fs::write(&cfg, r#"{"grid": 8, "seed": 1}"#).unwrap();
    let out = path(dir.path(), "metrics.csv");
    ok(&["bench-recovery", "--config", &cfg, "--out", &out]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(
        text.starts_with("fixture,method,l2_error\nduplicate,simcopy,0.0\n"),
        "{text}"
    );
    assert_eq!(text.lines().count(), 17);
}
