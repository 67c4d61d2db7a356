use std::path::Path;
use std::process::{Command, Output};

fn gloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gloc")).args(args).env("GLOC_WORKERS", "2").output().unwrap()
}

fn p(root: &Path, s: &str) -> String {
    root.join(s).to_string_lossy().into_owned()
}

fn manifest(dir: &str) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(Path::new(dir).join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2_and_validation_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gloc(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(gloc(&["--workers", "0", "gen-data", "--out", &p(tmp.path(), "w")]).status.code(), Some(2));

    let bad = gloc(&["--set", "graph.kk=3", "gen-data", "--out", &p(tmp.path(), "a")]);
    assert_eq!(bad.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(bad.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "config");

    assert!(gloc(&["gen-data", "--out", &p(tmp.path(), "d")]).status.success());
    // occupied output directory
    assert_eq!(gloc(&["gen-data", "--out", &p(tmp.path(), "d")]).status.code(), Some(1));
    assert!(gloc(&["gen-data", "--force", "--out", &p(tmp.path(), "d")]).status.success());
}

#[test]
fn flags_override_set_which_overrides_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[data]\ntrain_per_class = 7\nnoise = 0.2\n[run]\nseed = 3\n").unwrap();
    let cfg = cfg.to_string_lossy().into_owned();

    let out = p(tmp.path(), "a");
    assert!(gloc(&["--config", &cfg, "--set", "data.noise=0.1", "gen-data", "--out", &out]).status.success());
    let m = manifest(&out);
    assert_eq!(m["config"]["data"]["train_per_class"], 7);
    assert_eq!(m["config"]["data"]["noise"], 0.1);
    assert_eq!(m["config"]["run"]["seed"], 3);

    let out = p(tmp.path(), "b");
    assert!(gloc(&["--config", &cfg, "--set", "data.noise=0.1", "--seed", "9", "gen-data", "--noise", "0.3", "--out", &out]).status.success());
    let m = manifest(&out);
    assert_eq!(m["config"]["data"]["noise"], 0.3);
    assert_eq!(m["config"]["run"]["seed"], 9);
}

#[test]
fn values_compared_with_themselves_agree_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let r = tmp.path();
    assert!(gloc(&["--set", "data.train_per_class=10", "gen-data", "--out", &p(r, "data")]).status.success());
    let v = gloc(&["--set", "sampling.m=60", "value", "--method", "ame", "--data", &p(r, "data/data.csv"), "--out", &p(r, "ame")]);
    assert!(v.status.success(), "{}", String::from_utf8_lossy(&v.stderr));
    let values = p(r, "ame/values.csv");
    assert!(gloc(&["compare", "--values", &values, "--values", &values, "--out", &p(r, "cmp")]).status.success());
    let text = std::fs::read_to_string(r.join("cmp/metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("a,b,n,mse,mae,spearman"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[2], "20");
    assert_eq!(row[3].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[5].parse::<f64>().unwrap(), 1.0);

    // manifest records input hashes
    let m = manifest(&p(r, "cmp"));
    let inputs = m["inputs"].as_array().unwrap();
    assert_eq!(inputs.iter().filter(|f| f["file"] == "values.csv").count(), 2);
    assert!(inputs.iter().all(|f| f["sha256"].as_str().unwrap().len() == 64));
    assert_eq!(m["command"], "compare");
}
