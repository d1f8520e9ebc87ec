use std::path::Path;
use std::process::{Command, Output};

fn difflab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difflab")).args(args).output().expect("binary runs")
}

fn small_oracle_check(out: &Path) -> Vec<String> {
    let mut v: Vec<String> = ["oracle-check", "--out", out.to_str().unwrap()].iter().map(|s| s.to_string()).collect();
    for kv in ["oracle_check.gradient_points=40", "oracle_check.bounds_points=40", "oracle_check.clip_points=10", "oracle_check.vincent_pairs=1"] {
        v.push("--set".into());
        v.push(kv.into());
    }
    v
}

#[test]
fn oracle_check_passes_and_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let args = small_oracle_check(dir.path());
    let out = difflab(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("oracle-check: PASS"));
    for f in ["manifest.json", "report.csv", "report.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("# difflab-report v1 command=oracle-check config="));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "oracle-check");
    assert_eq!(manifest["config"]["oracle_check"]["gradient_points"], 40);
}

#[test]
fn corrupted_oracle_fails_with_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = small_oracle_check(dir.path());
    args.push("--corrupt".into());
    let out = difflab(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stdout).unwrap().contains("oracle-check: FAIL"));
}

#[test]
fn bad_configuration_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    for bad in ["train.no_such_field=1", "missing_equals_sign", "n_list=[8,4,16,32]"] {
        let out = difflab(&["train", "--out", out_dir, "--set", bad]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
        assert!(String::from_utf8(out.stderr).unwrap().starts_with("error:"));
    }
}

#[test]
fn trained_score_feeds_generate() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let gen_dir = dir.path().join("gen");
    let tiny = ["--set", "train.n_data=256", "--set", "train.optimizer.iterations=60", "--set", "grid.steps=32"];
    let mut args = vec!["train", "--out", train_dir.to_str().unwrap()];
    args.extend(tiny);
    let out = difflab(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let score = train_dir.join("trained_score.json");
    assert!(score.exists());

    let mut args = vec!["generate", "--json", "--out", gen_dir.to_str().unwrap(), "--score", score.to_str().unwrap()];
    args.extend(tiny);
    args.extend(["--set", "samples.n_generate=500", "--set", "samples.n_reference=2000"]);
    let out = difflab(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["count"], 500);
    assert!(report["w1"].as_f64().unwrap().is_finite());
    let samples = std::fs::read_to_string(gen_dir.join("samples.csv")).unwrap();
    assert!(samples.lines().filter(|l| !l.starts_with('#')).count() >= 500);
}

#[test]
fn seed_flag_changes_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let hash = |seed: &str| {
        let out_dir = dir.path().join(seed);
        let mut args = small_oracle_check(&out_dir);
        args.extend(["--seed".to_string(), seed.to_string()]);
        let out = difflab(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(out.status.code(), Some(0));
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
        (m["seed"].as_u64().unwrap(), m["config_hash"].as_str().unwrap().to_string())
    };
    let (s1, h1) = hash("1");
    let (s2, h2) = hash("2");
    assert_eq!((s1, s2), (1, 2));
    assert_ne!(h1, h2);
}
