use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
name = "tiny"
task = "sentiment"
runs = [{ method = "fine_tuning" }, { method = "soft_update" }]

[corpus]
writers = 4
unknown_writers = 1
examples_per_writer = 24
history_per_writer = 8
tweets_per_writer = 12

[train]
epochs = [1]
pretrain_epochs = 1
"#;

fn perprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perprompt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn synth_is_reproducible_and_rejects_missing_config() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(&spec, "writers = 3\nunknown_writers = 1\nexamples_per_writer = 12\nseed = 5\n").unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = perprompt(&["synth", "--config", path(&spec), "--out", path(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(!files(&a).is_empty());
    assert_eq!(files(&a), files(&b));

    let o = perprompt(&["synth", "--config", path(&tmp.path().join("absent.toml")), "--out", path(&a)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.toml"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(perprompt(&["run"]).status.code(), Some(2));
    assert_eq!(perprompt(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn fine_tuning_with_intermediate_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let m = tmp.path().join("m.toml");
    fs::write(&m, TINY.replace(r#"{ method = "soft_update" }"#, r#"{ method = "fine_tuning", intermediate = true }"#)).unwrap();
    let o = perprompt(&["run", "--config", path(&m), "--out", path(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn single_seed_run_then_analyze() {
    let tmp = TempDir::new().unwrap();
    let m = tmp.path().join("m.toml");
    fs::write(&m, TINY).unwrap();
    let out = tmp.path().join("out");
    let o = perprompt(&["run", "--config", path(&m), "--out", path(&out), "--seed", "3", "--seeds", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("| fine_tuning |"), "{table}");

    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    for cell in summary["cells"].as_array().unwrap() {
        assert_eq!(cell["report"]["seeds"].as_array().unwrap().len(), 1);
        assert_eq!(cell["report"]["summary"]["macro_f1"]["std"].as_f64(), Some(0.0));
    }
    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(csv.starts_with("method,intermediate,metric,mean,std,seeds"));

    let run = out.join("runs/sentiment/soft_update/seed3");
    let report = tmp.path().join("report");
    let o = perprompt(&["analyze", "--out", path(&report), path(&run), path(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("Gc 100.0%"));

    let o = perprompt(&["analyze", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("analysis/analysis.json").exists());

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = perprompt(&["analyze", "--out", path(&report), path(&empty), path(&run)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing prediction dump"));
}
