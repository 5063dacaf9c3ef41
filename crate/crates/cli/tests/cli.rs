use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn squarm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_squarm"))
        .args(args)
        .env_remove("SQUARM_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_into(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["run", "--out", out, "--preset", "squarm", "--T", "300", "--objective.d", "40"];
    args.extend_from_slice(extra);
    squarm(&args)
}

#[test]
fn same_seed_same_metrics() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = run_into(dir, &["--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ma = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.csv")).unwrap());
    assert!(String::from_utf8(ma).unwrap().starts_with("t,loss,"));

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert!(summary["total_bits"].as_u64().unwrap() > 0);
}

#[test]
fn seed_changes_the_run() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run_into(&a, &["--seed=1"]).status.success());
    assert!(run_into(&b, &["--seed=2"]).status.success());
    assert_ne!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn config_file_with_overrides() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"preset": "dpsgd", "T": 50, "n": 4, "topology": {"kind": "complete"}}"#).unwrap();
    let out = tmp.path().join("out");
    let o = squarm(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--eval_every",
        "10",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let ts: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ts, ["0", "10", "20", "30", "40", "49"]);
}

#[test]
fn malformed_config_names_the_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"beta": 1.5}"#).unwrap();
    let o = squarm(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("beta"), "{}", stderr(&o));

    fs::write(&cfg, r#"{"compresor": {"kind": "top_k"}}"#).unwrap();
    let o = squarm(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("compresor"), "{}", stderr(&o));

    fs::write(&cfg, "{not json").unwrap();
    let o = squarm(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_overrides_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().to_str().unwrap();
    for args in [
        vec!["run", "--out", out, "--H", "0"],
        vec!["run", "--out", out, "--preset", "adam"],
        vec!["run", "--out", out, "--T"],
        vec!["run", "--out", out, "stray"],
        vec!["run", "--out", out, "--preset", "squarm", "--omega", "formula"],
    ] {
        let o = squarm(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn divergence_exits_1_with_partial_metrics() {
    let tmp = TempDir::new().unwrap();
    let o = squarm(&[
        "run",
        "--out",
        tmp.path().to_str().unwrap(),
        "--lr.kind",
        "constant",
        "--lr.eta",
        "5",
        "--init.scale",
        "1",
        "--T",
        "5000",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    let csv = fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
}

#[test]
fn sweep_round_trip() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = squarm(&[
        "sweep", "--axis", "H", "--values", "1,2,5", "--out", out, "--preset", "squarm", "--T", "100",
        "--objective.d", "40",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rd = csv::Reader::from_path(tmp.path().join("sweep.csv")).unwrap();
    let headers = rd.headers().unwrap().clone();
    assert_eq!(&headers[0], "axis");
    assert_eq!(headers.len(), 10);
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    let values: Vec<&str> = rows.iter().map(|r| &r[1]).collect();
    assert_eq!(values, ["1", "2", "5"]);
    for v in ["1", "2", "5"] {
        assert!(tmp.path().join(format!("H={v}")).join("metrics.csv").is_file());
    }
    let bits: Vec<u64> = rows.iter().map(|r| r[6].parse().unwrap()).collect();
    assert!(bits[0] > bits[2], "{bits:?}");
}

#[test]
fn sweep_rejects_bad_input() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().to_str().unwrap();
    for args in [
        vec!["sweep", "--axis", "T", "--values", "", "--out", out],
        vec!["sweep", "--axis", "T", "--values", " , ", "--out", out],
        vec!["sweep", "--axis", "beta", "--values", "1", "--out", out],
        vec!["sweep", "--axis", "H", "--values", "2,0", "--out", out],
    ] {
        let o = squarm(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
    assert!(!tmp.path().join("sweep.csv").exists());
}

#[test]
fn verify_and_presets() {
    let o = squarm(&["verify"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("0 failed"));
    assert!(!text.contains("FAIL"));

    assert_eq!(squarm(&["verify", "nonsense"]).status.code(), Some(2));

    let o = squarm(&["presets"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for name in ["squarm", "sparq", "choco", "dpsgd", "local_sgd"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name}");
    }
}
