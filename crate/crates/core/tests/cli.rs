use std::path::{Path, PathBuf};
use std::process::Command;

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn out_dir(tag: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(tag);
    let _ = std::fs::remove_dir_all(&d);
    d
}

fn run(sub: &str, cfg: &str, out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_mfgc"))
        .args([sub, "--config"])
        .arg(config(cfg))
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn check_ll_pass_exits_zero() {
    let out = out_dir("check_ll");
    assert_eq!(run("check", "ll_pass.toml", &out), 0);
    let r = json(&out.join("report.json"));
    assert_eq!(r["verdict"], "pass");
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["subcommand"], "check");
    assert_eq!(m["exit_code"], 0);
}

#[test]
fn anti_gate_failure_exits_three() {
    let out = out_dir("anti_gate");
    assert_eq!(run("propagate", "anti_gate_fail.toml", &out), 3);
    let r = json(&out.join("report.json"));
    assert!(r["gate"].is_array());
}

#[test]
fn chain_rule_within_tolerance() {
    for cfg in ["chain.toml", "chain_separable.toml"] {
        let out = out_dir(cfg);
        assert_eq!(run("chain", cfg, &out), 0);
        let err = json(&out.join("report.json"))["report"]["metrics"]["max_abs_error"].as_f64().unwrap();
        assert!(err <= 1e-6, "{cfg}: {err}");
    }
}

#[test]
fn missing_config_exits_one() {
    let out = out_dir("missing");
    assert_eq!(run("check", "does_not_exist.toml", &out), 1);
}

#[test]
fn reruns_are_byte_identical() {
    for (sub, cfg) in [("check", "disp.toml"), ("chain", "chain.toml"), ("solve", "lq.toml")] {
        let (a, b) = (out_dir(&format!("rerun_a_{sub}")), out_dir(&format!("rerun_b_{sub}")));
        assert_eq!(run(sub, cfg, &a), 0);
        assert_eq!(run(sub, cfg, &b), 0);
        let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names.iter().filter(|n| *n != "manifest.json") {
            let (x, y) = (std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap());
            assert!(x == y, "{sub}: {n:?} differs between runs");
        }
    }
}
