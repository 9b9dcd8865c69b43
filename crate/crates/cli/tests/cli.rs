// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn hopscope(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hopscope"))
        .args(args)
        .env("HOPSCOPE_OUT", out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let f = fixtures();
    let text = format!(
        "[model]\ndir = {:?}\ntokenizer = {:?}\n\n[dataset]\ndump = {:?}\nrelations = {:?}\ntypes = {:?}\nper_type_cap = 2\n\n[run]\nsamples = 1\nmax_new_tokens = 4\nmax_queries = 1\nfull_grids = false\n{extra}",
        f.join("models/gpt2-facts"),
        f.join("tokenizer"),
        f.join("kb/dump.jsonl"),
        f.join("kb/relations.json"),
        f.join("kb/types.json"),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = hopscope(&["--config", cfg.to_str().unwrap(), "run", "third-hop"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("unknown experiment"));
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = hopscope(&["--config", missing.to_str().unwrap(), "build-dataset"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn render_without_records_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = hopscope(&["render", dir.path().join("empty").to_str().unwrap()], dir.path());
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("records.jsonl"), "{}", stderr(&o));
}

#[test]
fn build_dataset_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = hopscope(&["--config", cfg, "build-dataset", "--seed", "3"], &out);
        assert!(o.status.success(), "{}", stderr(&o));
        let d = out.join("dataset");
        outputs.push((
            std::fs::read(d.join("queries.jsonl")).unwrap(),
            std::fs::read(d.join("manifest.json")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(!outputs[0].0.is_empty());
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "subset = \"correct\"\n");
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    for args in [
        vec!["--config", cfg, "build-dataset"],
        vec!["--config", cfg, "filter"],
        vec!["--config", cfg, "run", "first-hop", "--window-len", "3"],
    ] {
        let o = hopscope(&args, &out);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let run = out.join("runs/first-hop");
    for f in ["records.jsonl", "report.json", "tables.txt", "stages.csv"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let tables = std::fs::read_to_string(run.join("tables.txt")).unwrap();
    let rerender = dir.path().join("again");
    let o = hopscope(&["render", run.to_str().unwrap(), "--per-attempt"], &rerender);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(rerender.join("tables.txt")).unwrap(), tables);
}
