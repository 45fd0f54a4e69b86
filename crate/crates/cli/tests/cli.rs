use std::path::Path;
use std::process::{Command, Output};

fn shufdp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shufdp"))
        .args(args)
        .current_dir(dir)
        .env("SHUFDP_OUT_DIR", dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_line(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).expect("error line is json")
}

#[test]
fn sigma_prints_one_positive_decimal() {
    let dir = tempfile::tempdir().unwrap();
    let o = shufdp(
        dir.path(),
        &["sigma", "--eps", "1", "--delta", "5e-6", "--c", "1", "--c-prime", "1", "--d", "85800000", "--p", "0.02", "--steps", "5000"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    let sigma: f64 = out.trim().parse().unwrap();
    assert!(sigma > 0.0 && sigma.is_finite());
}

#[test]
fn help_succeeds_and_lists_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let o = shufdp(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    for cmd in ["sigma", "curve", "heatmap", "train", "audit", "lognormal-compare", "toy-distance", "invariance-check", "shuffle-bench"] {
        assert!(out.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn missing_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = shufdp(dir.path(), &["sigma", "--eps", "1", "--delta", "1e-5"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "usage");

    let o = shufdp(dir.path(), &["lognormal-compare", "--d", "10"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_have_their_own_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "bogus = 1\n").unwrap();
    let o = shufdp(dir.path(), &["sigma", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["error"], "config");

    let o = shufdp(dir.path(), &["sigma", "--config", "absent.toml"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn domain_and_infeasible_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["sigma", "--eps", "1", "--c", "1", "--c-prime", "1", "--p", "0.02"];
    let mut args = base.to_vec();
    args.extend(["--delta", "1e-5", "--d", "1", "--steps", "100"]);
    let o = shufdp(dir.path(), &args);
    assert_eq!(o.status.code(), Some(5));
    assert_eq!(error_line(&o)["error"], "domain");

    let mut args = base.to_vec();
    // per-invocation delta 0.45 / 0.02 exceeds one
    args.extend(["--delta", "0.9", "--d", "100", "--steps", "1"]);
    let o = shufdp(dir.path(), &args);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(error_line(&o)["error"], "infeasible");
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("m.toml"),
        "eps = 2.0\ndelta = 1e-5\nc = 1.0\nc_prime = 1.0\nd = 1000\np = 0.02\nsteps = 100\n",
    )
    .unwrap();
    let from_file: f64 = stdout(&shufdp(dir.path(), &["sigma", "--config", "m.toml"])).trim().parse().unwrap();
    let overridden: f64 =
        stdout(&shufdp(dir.path(), &["sigma", "--config", "m.toml", "--eps", "0.5"])).trim().parse().unwrap();
    let direct: f64 = stdout(&shufdp(
        dir.path(),
        &["sigma", "--eps", "0.5", "--delta", "1e-5", "--c", "1", "--c-prime", "1", "--d", "1000", "--p", "0.02", "--steps", "100"],
    ))
    .trim()
    .parse()
    .unwrap();
    assert!(overridden > from_file);
    assert_eq!(overridden, direct);
}

#[test]
fn curve_writes_csv_and_manifest_to_the_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = shufdp(
        dir.path(),
        &["curve", "--eps-list", "0.5,1", "--delta", "1e-5", "--c", "1", "--c-prime", "1", "--d", "1000", "--p", "0.02", "--steps", "100"],
    );
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epsilon,sigma_shuffled,sigma_unshuffled"));
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[1] < v[2], "shuffled sigma should be smaller: {line}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("curve.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "curve");
    assert!(manifest["outputs"][0].as_str().unwrap().ends_with("curve.csv"));
}

#[test]
fn heatmap_treats_d_one_as_unshuffled() {
    let dir = tempfile::tempdir().unwrap();
    let o = shufdp(
        dir.path(),
        &["heatmap", "--d-list", "1,1e3", "--eps-list", "1", "--delta", "1e-5", "--c", "1", "--c-prime", "1", "--p", "0.02", "--steps", "100"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(dir.path().join("heatmap.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["d", "epsilon", "sigma"]);
    let rows: Vec<(u64, f64, f64)> = rdr.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].0, 1);
    assert!(rows[0].2 > rows[1].2);
}

#[test]
fn toy_distance_reports_the_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let o = shufdp(dir.path(), &["toy-distance", "--grid", "81", "--out", "toy.csv"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let ratio: f64 = out.split("ratio=").nth(1).unwrap().trim().parse().unwrap();
    assert!((ratio - 2f64.sqrt()).abs() < 0.05, "{out}");
    let rows = std::fs::read_to_string(dir.path().join("toy.csv")).unwrap().lines().count();
    assert_eq!(rows, 81 * 81 + 1);
    assert!(dir.path().join("toy.csv.manifest.json").exists());
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("train.toml"),
        r#"
c = 1.0
c_prime = 16.0
batch_size = 32
steps = 5
lr = 0.5
seed = 3

[budget]
epsilon = 2.0
delta = 1e-5

[model]
input_dim = 4
seed = 1

[[model.blocks]]
kind = "mlp"
hidden = 8
output = 2
"#,
    )
    .unwrap();
    let o = shufdp(dir.path(), &["train", "--config", "train.toml", "--data", "synthetic:n=256,dim=4", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    for f in ["weights.bin", "steps.jsonl", "summary.json", "manifest.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(std::fs::read_to_string(run.join("steps.jsonl")).unwrap().lines().count(), 5);
    assert_eq!(&std::fs::read(run.join("weights.bin")).unwrap()[..8], b"SHDPW001");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn invariance_check_reports_tiny_deviations() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("model.toml"),
        "input_dim = 6\nseed = 0\n\n[[blocks]]\nkind = \"attention\"\nheads = 2\nd_k = 4\nd_v = 3\n\n[[blocks]]\nkind = \"mlp\"\nhidden = 8\noutput = 3\n",
    )
    .unwrap();
    let o = shufdp(dir.path(), &["invariance-check", "--config", "model.toml", "--seed", "2", "--trials", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for line in stdout(&o).lines().filter(|l| l.starts_with("max_")) {
        let v: f64 = line.split('=').nth(1).unwrap().parse().unwrap();
        assert!(v < 1e-12, "{line}");
    }
}

#[test]
fn shuffle_bench_confirms_a_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let o = shufdp(dir.path(), &["shuffle-bench", "--n", "64", "--reps", "2", "--precision", "f32"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("is_permutation=true"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("shuffle_bench.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 64);
}

#[test]
fn audit_and_lognormal_compare_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = shufdp(
        dir.path(),
        &["audit", "--sigma", "2", "--c", "1", "--c-prime", "1", "--d", "4", "--trials", "1000", "--bootstrap", "20", "--out", "a.json"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    assert!(report["outcome"]["eps_empirical"].as_f64().unwrap() >= 0.0);
    assert!(dir.path().join("a.json.manifest.json").exists());

    let o = shufdp(dir.path(), &["lognormal-compare", "--d", "50", "--sigma", "0.25", "--draws", "5000", "--points", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(dir.path().join("lognormal_compare.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["x", "cdf_fw", "cdf_mc"]);
    assert_eq!(rdr.records().count(), 20);
}
