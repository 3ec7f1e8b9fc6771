use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mcegnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcegnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn charged_data(dir: &Path, name: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let o = mcegnn(&["gen-data", "charged", "--systems", "12", "--seed", "1", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn train(dir: &Path, data: &Path, name: &str, extra: &[&str]) -> (Output, std::path::PathBuf) {
    let run = dir.join(name);
    let mut args = vec![
        "train", "--dataset", p(data), "--epochs", "2", "--batch-size", "4", "--quiet", "--out", p(&run),
    ];
    args.extend_from_slice(extra);
    (mcegnn(&args), run)
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = charged_data(dir.path(), "a.bin");
    let b = charged_data(dir.path(), "b.bin");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let summary = read_json(&dir.path().join("a.summary.json"));
    assert_eq!(summary["samples"], 12);
    assert_eq!(summary["bodies"], 5);
    assert_eq!(summary["features"], "charge");
    assert!(dir.path().join("a.config.json").exists());
}

#[test]
fn orbital_system_has_ten_bodies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("orb.bin");
    let o = mcegnn(&[
        "gen-data", "orbital", "--planets", "3", "--moons", "2", "--systems", "3", "--val-frac", "0.3",
        "--test-frac", "0.3", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_json(&dir.path().join("orb.summary.json"))["bodies"], 1 + 3 + 3 * 2);
}

#[test]
fn horizon_past_trajectory_end_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.bin");
    let o = mcegnn(&["gen-data", "charged", "--systems", "5", "--horizon", "500", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("horizon"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn channel_count_changes_params_by_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let data = charged_data(dir.path(), "d.bin");
    let size = ["--hidden", "64", "--layers", "4"];
    let mut params = Vec::new();
    for m in ["1", "2"] {
        let mut extra = vec!["--channels", m];
        extra.extend_from_slice(&size);
        let (o, run) = train(dir.path(), &data, &format!("m{m}"), &extra);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let report = read_json(&run.join("report.json"));
        assert!(run.join("checkpoint.bin").exists() && run.join("config.json").exists());
        params.push(report["param_count"].as_u64().unwrap());
    }
    // hidden 64, 4 layers, one edge attribute:
    // params(1) = 133764 and params(m) - params(1) = 128 (m^2 - 1) + 515 (m - 1)
    assert_eq!(params[0], 133_764);
    assert_eq!(params[1] - params[0], 128 * 3 + 515);
}

#[test]
fn clipping_never_raises_the_logged_norm() {
    let dir = tempfile::tempdir().unwrap();
    let data = charged_data(dir.path(), "d.bin");
    let (o, run) = train(dir.path(), &data, "clip", &["--clip-norm", "1e-3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&run.join("report.json"));
    for e in report["epochs"].as_array().unwrap() {
        let (pre, post) = (e["grad_norm_pre"].as_f64().unwrap(), e["grad_norm_post"].as_f64().unwrap());
        assert!(pre >= post && post <= 1e-3 + 1e-12, "{pre} {post}");
    }
    assert_eq!(read_json(&run.join("config.json"))["train"]["clip_norm"], 1e-3);
}

#[test]
fn train_rerun_and_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = charged_data(dir.path(), "d.bin");
    let (a, run_a) = train(dir.path(), &data, "a", &["--seed", "3"]);
    let (b, run_b) = train(dir.path(), &data, "b", &["--seed", "3"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(code(&b), 0);
    for f in ["report.json", "losses.csv", "checkpoint.bin"] {
        assert_eq!(std::fs::read(run_a.join(f)).unwrap(), std::fs::read(run_b.join(f)).unwrap(), "{f}");
    }
    let test_metric = read_json(&run_a.join("report.json"))["test_metric"].as_f64().unwrap();
    let metric = dir.path().join("eval/metric.json");
    let o = mcegnn(&[
        "eval", "--checkpoint", p(&run_a.join("checkpoint.bin")), "--dataset", p(&data), "--batch-size", "100",
        "--out", p(&metric),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&metric);
    assert_eq!(v["metric"], "mse");
    assert_eq!(v["value"].as_f64().unwrap().to_bits(), test_metric.to_bits());
    assert!(dir.path().join("eval/metric.config.json").exists());
}

#[test]
fn eval_rejects_incompatible_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = charged_data(dir.path(), "d.bin");
    let (o, run) = train(dir.path(), &data, "a", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let orb = dir.path().join("orb.bin");
    let o = mcegnn(&["gen-data", "orbital", "--systems", "3", "--val-frac", "0.3", "--test-frac", "0.3", "--out", p(&orb)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = mcegnn(&["eval", "--checkpoint", p(&run.join("checkpoint.bin")), "--dataset", p(&orb)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("edge inputs"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let (o, _) = train(dir.path(), &dir.path().join("nope.bin"), "r", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.bin"));
}

#[test]
fn equicheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("model.json");
    std::fs::write(&cfg, r#"{"n_layers": 2, "hidden": 8, "message": 8, "channels": 2}"#).unwrap();
    let out = dir.path().join("eq.json");
    let o = mcegnn(&["equicheck", "--config", p(&cfg), "--trials", "3", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&out);
    assert_eq!(report["all_pass"], true);
    assert!(dir.path().join("eq.config.json").exists());

    // a zero tolerance cannot absorb rounding
    let o = mcegnn(&["equicheck", "--config", p(&cfg), "--trials", "3", "--tol", "0"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("FAIL"));
}

#[test]
fn bench_table_shape() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = mcegnn(&["bench", "--batch", "4", "--repeats", "10", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut reader = csv::Reader::from_path(&out).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["m", "forward_seconds_mean", "forward_seconds_std", "params"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    let ms: Vec<u64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(ms, [1, 2, 5, 10, 25]);
    let params: Vec<u64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(params[1] - params[0], 128 * 3 + 515);
    assert!(params.windows(2).all(|w| w[1] > w[0]));
    assert!(dir.path().join("bench.config.json").exists());
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(code(&mcegnn(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&mcegnn(&["gen-data", "plasma", "--out", "x"])), 1);
    assert_eq!(code(&mcegnn(&[])), 1);
    let help = mcegnn(&["bench", "--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for flag in ["--channels", "--batch", "--nodes", "--repeats", "--seed", "--out"] {
        assert!(text.contains(flag), "{flag}");
    }
}
