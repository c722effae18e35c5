use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "stream": {"total_classes": 6, "inc_n": 2},
  "dataset": {"kind": "synthetic", "dim": 6, "per_class": 10, "separation": 8.0, "noise": 0.5},
  "backbone": {"input_dim": 6, "embed_dim": 8, "hidden_dim": 8, "num_blocks": 1, "init_scale": 0.3},
  "train": {"epochs": 2, "batch_size": 8, "r": 4},
  "variant": {"use_merge": true, "use_retrieval": true, "use_self_refine": true, "use_ensemble": true, "use_alignment": true},
  "output_dir": "OUT",
  "seed": 11
}"#;

fn mos(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mos"));
    cmd.args(args).env_remove("MOS_OUT");
    if let Some(dir) = out_env {
        cmd.env("MOS_OUT", dir);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, out: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, TINY.replace("OUT", out.to_str().unwrap())).unwrap();
    path
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn run_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &out);
    let o = mos(&["run", "--config", cfg.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.json", "stages.csv", "curve.csv", "diagnostics.csv", "loss.csv", "config.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(out.join("checkpoints/backbone.mos").is_file());
    assert!(out.join("checkpoints/gaussian_stats.mos").is_file());
    assert!(out.join("checkpoints/adapters/registry.json").is_file());

    let o = mos(&["report", "--dir", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("A_B"));
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = write_config(tmp.path(), &a);
    for dir in [&a, &b] {
        let o = mos(&["run", "--config", cfg.to_str().unwrap()], Some(dir));
        assert!(o.status.success());
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        if x.file_name().unwrap() == "config.json" {
            continue; // records its own output directory
        }
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn seed_flag_and_env_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tmp.path().join("unused"));
    let env_out = tmp.path().join("env");
    let o = mos(&["run", "--config", cfg.to_str().unwrap(), "--seed", "42"], Some(&env_out));
    assert!(o.status.success());
    assert!(!tmp.path().join("unused").exists());
    let metrics = std::fs::read_to_string(env_out.join("metrics.json")).unwrap();
    assert!(metrics.contains("\"seed\": 42,"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, TINY.replace("\"seed\": 11", "\"seed\": 11, \"sed\": 1")).unwrap();
    assert_eq!(mos(&["run", "--config", bad.to_str().unwrap()], None).status.code(), Some(1));
    assert_eq!(mos(&["run", "--config", "/nonexistent.json"], None).status.code(), Some(1));
    assert_eq!(mos(&["bogus"], None).status.code(), Some(1));

    // parses, but the dataset file is missing at run time
    let files = TINY.replace(
        r#"{"kind": "synthetic", "dim": 6, "per_class": 10, "separation": 8.0, "noise": 0.5}"#,
        r#"{"kind": "files", "format": "csv", "train": "/nonexistent/train.csv", "test": "/nonexistent/test.csv"}"#,
    );
    let missing = tmp.path().join("missing.json");
    std::fs::write(&missing, files).unwrap();
    assert_eq!(mos(&["run", "--config", missing.to_str().unwrap()], None).status.code(), Some(2));
    assert_eq!(mos(&["report", "--dir", tmp.path().to_str().unwrap()], None).status.code(), Some(2));
}

#[test]
fn ablate_and_gradcheck_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("abl");
    let cfg = write_config(tmp.path(), &out);
    let o = mos(&["ablate", "--config", cfg.to_str().unwrap(), "--seeds", "2"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    // five pipeline variants plus the naive baseline, per seed
    assert_eq!(table.lines().count(), 1 + 2 * 6);
    assert!(out.join("ablation_summary.csv").is_file());

    let o = mos(&["gradcheck", "--problems", "3"], None);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 failures"));
}
