use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_otstab"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("spawn otstab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn identical_measures_exit_zero_with_zero_cost() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("smoke_identical.json");
    let o = run(&["stability", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("trials.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "t_c").unwrap();
    let mut n = 0;
    for l in lines {
        assert_eq!(l.split(',').nth(col).unwrap().parse::<f64>().unwrap(), 0.0);
        n += 1;
    }
    assert_eq!(n, 2);
    for f in ["summary.json", "meta.json", "config.json", "scatter.svg", "manifest.json", "run.log"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn malformed_cost_exits_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("smoke_identical.json")).unwrap();
    for bad in [
        text.replace("\"cap\": 2.0", "\"cap\": \"two\""),
        text.replace("\"cap\": 2.0", "\"cap\": -2.0"),
        text.replace("truncated_euclidean", "taxicab"),
    ] {
        let p = dir.path().join("bad.json");
        std::fs::write(&p, bad).unwrap();
        let o = run(&["stability", "--config", p.to_str().unwrap()], &dir.path().join("o"));
        assert_eq!(o.status.code(), Some(2));
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains("line 8"), "{err}");
    }
}

#[test]
fn overrides_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("smoke_identical.json");
    let o = run(&["stability", "--config", cfg.to_str().unwrap(), "--mode", "parabolic"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["stability", "--config", cfg.to_str().unwrap(), "--trials", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["stability", "--config", cfg.to_str().unwrap(), "--grid", "4x4"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["stability", "--config", cfg.to_str().unwrap(), "--grid", "sixty"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["stability"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ot_two_by_two_matches_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("ot_2x2.json");
    let o = run(&["ot", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.contains("cost 1.0000000000000000e0"), "{s}");
    assert!(s.contains("brute_force 1.0000000000000000e0 match"), "{s}");
    assert!(s.contains("duality_gap 0.0000000000000000e0"), "{s}");
    assert!(dir.path().join("plan.csv").exists());
}

#[test]
fn cgo_basis_with_zero_potential_passes_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("cgo_q0.json");
    let o = run(&["cgo-basis", "--config", cfg.to_str().unwrap(), "--grid", "33x33"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.contains("sigma_min"), "{s}");
    assert!(s.contains("closed-form check: pass"), "{s}");
}

#[test]
fn parabolic_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("parabolic.json");
    let args = ["stability", "--config", cfg.to_str().unwrap(), "--mode", "parabolic", "--trials", "1", "--seed", "1", "--grid", "33x33"];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&args, &a).status.code(), Some(0));
    assert_eq!(run(&args, &b).status.code(), Some(0));
    for f in ["trials.csv", "summary.json", "meta.json", "config.json", "scatter.svg", "manifest.json"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn manifest_lists_every_artifact_with_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("smoke_identical.json");
    assert_eq!(run(&["stability", "--config", cfg.to_str().unwrap()], dir.path()).status.code(), Some(0));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let hash = m["config_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    let files: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|a| a["file"].as_str().unwrap()).collect();
    assert_eq!(files, ["config.json", "trials.csv", "summary.json", "meta.json", "scatter.svg"]);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config_sha256"].as_str().unwrap(), hash);
    assert!(std::fs::read_to_string(dir.path().join("scatter.svg")).unwrap().contains(hash));
}

#[test]
fn forward_and_control_commands_write_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("parabolic.json");
    let c = cfg.to_str().unwrap();
    let o = run(&["forward-parabolic", "--config", c, "--grid", "33x33"], &dir.path().join("fp"));
    assert_eq!(o.status.code(), Some(0));
    let head = std::fs::read_to_string(dir.path().join("fp/sigma_trace.csv")).unwrap();
    assert!(head.starts_with("time,arc,value\n"));
    let o = run(&["control", "--config", c, "--grid", "33x33"], &dir.path().join("ct"));
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let log = std::fs::read_to_string(dir.path().join("ct/control_log.jsonl")).unwrap();
    for l in log.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["control"].as_f64().unwrap() > 0.0);
    }
    let e = config("elliptic.json");
    let o = run(&["forward-elliptic", "--config", e.to_str().unwrap(), "--grid", "33x33"], &dir.path().join("fe"));
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("mass_check"));
}
