use std::fs;
use std::path::Path;
use std::process::Command;

fn statetrace(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_statetrace"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf-8")
}

#[test]
fn simgen_report_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let said = statetrace(d, &["simgen", "--count", "4", "--seed", "2", "--out", "flights"]);
    assert!(said.contains("4 flights"));
    assert!(d.join("flights/manifest.json").exists());

    let config = serde_json::json!({
        "dataset": {"simgen": {"count": 10}},
        "model": {
            "conv_stack": [{"filters": 4, "kernel": 3}],
            "gru_stack": [6],
            "dense_hidden": 6,
            "max_epochs": 1
        },
        "cpd": {
            "methods": [{"method": "bottom_up"}],
            "costs": [{"kind": "l2"}],
            "penalties": [500.0]
        },
        "ml": {"specs": [{"window": 3, "classifier": {"kind": "ridge"}}]}
    });
    fs::write(d.join("exp.json"), config.to_string()).unwrap();
    let said = statetrace(d, &["--threads", "1", "report", "--config", "exp.json", "--out", "run"]);
    assert!(said.contains("class_f1"), "{said}");
    for f in ["summary.json", "model_scores.csv", "cpd_baseline.csv", "ml_baseline.csv", "timeline.csv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let again = statetrace(d, &["report", "--config", "exp.json", "--out", "run"]);
    assert!(again.contains("stages run: []"), "{again}");

    statetrace(
        d,
        &["predict", "--checkpoint", "run/checkpoints/hybrid.ckpt", "--data", "flights/manifest.json", "--out", "pred"],
    );
    let csv = fs::read_to_string(d.join("pred/predictions.csv")).unwrap();
    assert!(csv.starts_with("flight,t,state\n"));
    assert!(csv.lines().count() > 4 * 800);
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_statetrace"))
        .args(["simgen", "--variant", "c", "--out", "/nonexistent/never"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown aircraft variant"));
}
