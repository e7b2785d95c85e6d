use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> String {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset");
    root.join(name).canonicalize().unwrap().display().to_string()
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"seed = 5
[data]
train = ["{}", "{}"]
test = ["{}", "{}"]
train_limit = 200
test_limit = 100
[train]
epochs = 1
[attack]
grid = [0.0, 0.5, 1.0]
runs = 3
{extra}
"#,
        data("train-images-idx3-ubyte"),
        data("train-labels-idx1-ubyte"),
        data("t10k-images-idx3-ubyte"),
        data("t10k-labels-idx1-ubyte"),
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn poinf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poinf")).args(args).env("POINF_THREADS", "2").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = poinf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn body(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).collect::<Vec<_>>().join("\n")
}

#[test]
fn attack_writes_one_row_per_run_and_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["attack", "--config", cfg, "--out", a.to_str().unwrap()]);
    ok(&["attack", "--config", cfg, "--out", b.to_str().unwrap()]);

    let runs = std::fs::read_to_string(a.join("attack_runs.csv")).unwrap();
    let mut lines = runs.lines();
    assert!(lines.next().unwrap().starts_with("# poinf attack config_sha256="));
    assert_eq!(lines.next().unwrap(), "dataset,p,strategy,policy,biases_hidden,run,acc_attacked,acc_baseline,adv");
    assert_eq!(lines.count(), 3 * 3);
    for f in ["attack_runs.csv", "attack_summary.csv"] {
        assert_eq!(body(&a.join(f)), body(&b.join(f)), "{f}");
    }

    let report = ok(&["report", a.join("attack_summary.csv").to_str().unwrap(), "--config", cfg]);
    let last = report.lines().find(|l| l.starts_with("1.0")).unwrap();
    assert!(last.ends_with("0.0 (0.0)"), "{report}");
}

#[test]
fn report_rejects_files_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[he]\nbackend = \"cost-model\"");
    let out = dir.path().join("o");
    ok(&["cost", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let csv = out.join("overhead.csv");
    let res = poinf(&["report", csv.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--seed", "6"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("config hash mismatch"));
}

#[test]
fn cost_with_published_table_matches_expected_factor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "[he]\nbackend = \"cost-model\"\n[cost]\ngrid = [0.0, 1.0]\n[[cost.layers]]\nkind = \"fc\"\npacking = \"naive\"\ninputs = 128\noutputs = 10",
    );
    let out = dir.path().join("o");
    ok(&["cost", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let text = std::fs::read_to_string(out.join("overhead.csv")).unwrap();
    let row = text.lines().find(|l| l.contains(",1.0,")).unwrap();
    let factor: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert!((factor - 18.8).abs() < 1e-9, "{row}");
    assert!((10.0..=40.0).contains(&factor));
}

#[test]
fn unknown_config_key_is_rejected_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    std::fs::write(&cfg, std::fs::read_to_string(&cfg).unwrap() + "\nunknown_key = 1\n").unwrap();
    let res = poinf(&["cost", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8(res.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));
}

#[test]
fn missing_input_exits_with_code_one() {
    let res = poinf(&["report", "/nonexistent/file.csv"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error: "));
}

#[test]
fn plan_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("o");
    let (cfg, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    ok(&["train", "--config", cfg, "--out", out_s]);
    let w = out.join("weights.pow");
    ok(&["plan", "--config", cfg, "--weights", w.to_str().unwrap(), "--p", "0.3", "--strategy", "max-weight", "--out", out_s]);
    let plan = poinf_core::leakage::LeakagePlan::from_json(&std::fs::read_to_string(out.join("plan.json")).unwrap()).unwrap();
    assert!(plan.layers.iter().all(|l| l.p == 0.3));
    assert_eq!(plan.strategy, poinf_core::leakage::SelectionStrategy::MaxWeight);
}
