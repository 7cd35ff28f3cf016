use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

const RESPONSE: &str = r#"
experiment = "response"
seed = 5

[family]
name = "doubling"

[observable]
name = "trig"

[numerics]
cells = [128]
samples_per_cell = 16
t0 = 0.0

[t_grid]
kind = "list"
values = [-0.01, 0.0, 0.01]
"#;

fn srblab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_srblab")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn manifest(dir: &Path) -> String {
    fs::read_to_string(dir.join("manifest.txt")).unwrap()
}

#[test]
fn same_seed_reproduces_every_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "r.toml", RESPONSE);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = srblab(&["run", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(manifest(&a), manifest(&b));
    let stdout = String::from_utf8(srblab(&["run", &cfg, "--out", a.to_str().unwrap()]).stdout).unwrap();
    assert!(stdout.lines().any(|l| l.contains("results.json")), "{stdout}");
}

#[test]
fn seed_override_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "r.toml", RESPONSE);
    let out = tmp.path().join("o");
    let o = srblab(&["run", &cfg, "--seed", "11", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let results: Value = serde_json::from_str(&fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(results["seed"], 11);
    assert_eq!(results["experiment"], "response");
}

#[test]
fn manifest_hashes_match_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "r.toml", RESPONSE);
    let out = tmp.path().join("o");
    assert!(srblab(&["run", &cfg, "--out", out.to_str().unwrap()]).status.success());
    for line in manifest(&out).lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        let bytes = fs::read(out.join(cols[0])).unwrap();
        assert_eq!(cols[1].parse::<usize>().unwrap(), bytes.len());
        assert_eq!(cols[2], srblab::io::sha256_hex(&bytes));
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let bad_key = write_config(tmp.path(), "k.toml", "experiment = \"rates\"\nseeed = 1\n");
    assert_eq!(srblab(&["run", &bad_key]).status.code(), Some(2));
    let bad_value = write_config(tmp.path(), "v.toml", &RESPONSE.replace("cells = [128]", "cells = [0]"));
    assert_eq!(srblab(&["run", &bad_value, "--out", out.to_str().unwrap()]).status.code(), Some(2));
    // rates need a stable direction, which the doubling map lacks
    let unsupported = write_config(tmp.path(), "u.toml", "experiment = \"rates\"\n[family]\nname = \"doubling\"\n");
    assert_eq!(srblab(&["run", &unsupported, "--out", out.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(srblab(&["run", "/nonexistent.toml"]).status.code(), Some(2));
}

#[test]
fn list_names_all_builtins() {
    let o = srblab(&["list"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for name in ["doubling", "cat_translate", "cat_dissipative", "solenoid", "skew_atomic", "bump_heaviside", "holder", "evt"] {
        assert!(text.contains(name), "missing {name}");
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            srblab::cli::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 3);
}
