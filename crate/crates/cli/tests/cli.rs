use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn xmodal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmodal"))
        .args(args)
        .current_dir(dir)
        .env_remove("XMODAL_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_writes_requested_count_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = xmodal(
        dir.path(),
        &["simulate", "--scenes", "100", "--boxes", "8", "--shift-max", "15", "--seed", "7", "-o", "s.jsonl"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("s.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 100);
    let m = manifest(&dir.path().join("s.jsonl.manifest.json"));
    assert_eq!(m["subcommand"], "simulate");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["sim"]["shift_max"], 15.0);
    assert_eq!(m["artifacts"]["s.jsonl"].as_str().unwrap().len(), 64);
}

#[test]
fn same_flags_give_same_digests() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        assert_eq!(code(&xmodal(dir.path(), &["simulate", "--scenes", "20", "--seed", "3", "-o", name])), 0);
    }
    assert_eq!(fs::read(dir.path().join("a.jsonl")).unwrap(), fs::read(dir.path().join("b.jsonl")).unwrap());
    let verify = xmodal(dir.path(), &["--verify", "a.jsonl.manifest.json"]);
    assert_eq!(code(&verify), 0, "{}", String::from_utf8_lossy(&verify.stderr));
}

#[test]
fn default_output_directory_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_xmodal"))
        .args(["simulate", "--scenes", "2"])
        .current_dir(dir.path())
        .env("XMODAL_OUT_DIR", dir.path().join("runs"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("runs/scenes.jsonl").exists());
    assert!(dir.path().join("runs/scenes.jsonl.manifest.json").exists());
}

#[test]
fn match_on_aligned_scenes_is_exact_and_verifiable() {
    let dir = tempfile::tempdir().unwrap();
    let sim = ["simulate", "--scenes", "30", "--offset", "0,0", "--dropout", "0", "--spurious", "0", "-o", "s.jsonl"];
    assert_eq!(code(&xmodal(dir.path(), &sim)), 0);
    let out = xmodal(dir.path(), &["match", "s.jsonl", "-o", "pairs.jsonl"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["score"]["precision"], 1.0);
    assert_eq!(fs::read_to_string(dir.path().join("pairs.jsonl")).unwrap().lines().count(), 30);
    let stored: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("pairs.score.json")).unwrap()).unwrap();
    assert_eq!(stored, summary);
    assert_eq!(code(&xmodal(dir.path(), &["--verify", "pairs.jsonl.manifest.json"])), 0);
}

#[test]
fn match_without_filtering_loses_precision_on_noisy_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let sim = ["simulate", "--scenes", "100", "--dropout", "0.2", "--spurious", "0.2", "--seed", "5", "-o", "s.jsonl"];
    assert_eq!(code(&xmodal(dir.path(), &sim)), 0);
    let precision = |extra: &[&str]| {
        let mut args = vec!["match", "s.jsonl", "-o", "p.jsonl"];
        args.extend_from_slice(extra);
        let out = xmodal(dir.path(), &args);
        assert_eq!(code(&out), 0);
        serde_json::from_slice::<Value>(&out.stdout).unwrap()["score"]["precision"].as_f64().unwrap()
    };
    assert!(precision(&[]) > precision(&["--no-plf"]));
}

#[test]
fn tampered_input_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&xmodal(dir.path(), &["simulate", "--scenes", "5", "-o", "s.jsonl"])), 0);
    assert_eq!(code(&xmodal(dir.path(), &["filter", "s.jsonl", "-o", "f.jsonl"])), 0);
    assert_eq!(code(&xmodal(dir.path(), &["--verify", "f.jsonl.manifest.json"])), 0);
    let path = dir.path().join("s.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.lines().take(3).collect::<Vec<_>>().join("\n")).unwrap();
    assert_eq!(code(&xmodal(dir.path(), &["--verify", "f.jsonl.manifest.json"])), 2);
}

#[test]
fn pipeline_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&xmodal(dir.path(), &["simulate", "--scenes", "8", "-o", "s.jsonl"])), 0);
    let args = [
        "pipeline",
        "s.jsonl",
        "--k1",
        "2",
        "--k2",
        "2",
        "--k3",
        "2",
        "--k4",
        "2",
        "--steps-per-epoch",
        "50",
        "-o",
        "r.json",
    ];
    let out = xmodal(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 8);
    let csv = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv.starts_with("epoch,phase,lambda,"));
    assert_eq!(csv.lines().count(), 9);
    let m = manifest(&dir.path().join("r.json.manifest.json"));
    assert_eq!(m["config"]["pipeline"]["ema_decay"], 0.9999);
    assert_eq!(m["artifacts"].as_object().unwrap().len(), 2);
}

#[test]
fn skip_stage1_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&xmodal(dir.path(), &["simulate", "--scenes", "4", "-o", "s.jsonl"])), 0);
    let args = [
        "pipeline",
        "s.jsonl",
        "--k1",
        "1",
        "--k2",
        "1",
        "--k3",
        "1",
        "--k4",
        "1",
        "--steps-per-epoch",
        "10",
        "--skip-stage1",
    ];
    let out = xmodal(dir.path(), &[&args[..], &["-o", "r.json"]].concat());
    assert_eq!(code(&out), 0);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["sm_trained_before_stage2"], false);
}

#[test]
fn sweep_emits_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = xmodal(
        dir.path(),
        &["sweep-shift", "--min", "-15", "--max", "15", "--step", "3", "--scenes", "4", "-o", "g.csv"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("g.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("dx,dy,ir_map,rgb_map,match_accuracy,match_precision"));
    let ir: Vec<&str> = lines.map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(ir.len(), 121);
    assert!(ir.iter().all(|v| *v == ir[0]));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&xmodal(dir.path(), &["simulate", "--scenes", "many"])), 1);
    assert_eq!(code(&xmodal(dir.path(), &["sweep-shift", "--min", "3", "--max", "-3"])), 1);
    assert_eq!(code(&xmodal(dir.path(), &["sweep-shift", "--step", "0"])), 1);
    assert_eq!(code(&xmodal(dir.path(), &["pipeline", "x.jsonl", "--k2", "0"])), 1);
    assert_eq!(code(&xmodal(dir.path(), &["simulate", "--dropout", "1.5"])), 1);
    assert_eq!(code(&xmodal(dir.path(), &[])), 1);
    assert_eq!(code(&xmodal(dir.path(), &["--help"])), 0);
}

#[test]
fn malformed_record_is_a_data_error_naming_the_line() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&xmodal(dir.path(), &["simulate", "--scenes", "3", "-o", "s.jsonl"])), 0);
    let path = dir.path().join("s.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{not json}\n");
    fs::write(&path, text).unwrap();
    let out = xmodal(dir.path(), &["match", "s.jsonl"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
}

#[test]
fn diverging_pipeline_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&xmodal(dir.path(), &["simulate", "--scenes", "4", "-o", "s.jsonl"])), 0);
    let args = ["pipeline", "s.jsonl", "--k1", "1", "--k2", "1", "--k3", "1", "--k4", "1", "--steps-per-epoch", "2000"];
    let out = xmodal(dir.path(), &[&args[..], &["--lr-box", "5", "-o", "r.json"]].concat());
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}
