//! Runs the `i2e` binary through the whole pipeline on a small synthetic
//! market.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL_CONFIG: &str = r#"{
  "seed": 7,
  "data": {"source": "synthetic", "synthetic": {"n_stocks": 12, "n_days": 520}},
  "split": {"fractions": {"train": 0.6, "validation": 0.2}},
  "transformer": {"blocks": 1, "d_model": 8, "heads": 2, "ffn_hidden": 16, "head_widths": [8]},
  "lstm": {"backbone": "lstm", "blocks": 1, "lstm_hidden": 8, "head_widths": [8]},
  "pretrain": {"epochs": 3, "batch_size": 64},
  "finetune": {"epochs": 3, "batch_size": 64},
  "regression": {"epochs": 3, "batch_size": 64},
  "gbt": {"n_estimators": 6, "max_depth": 3, "max_leaves": 8},
  "backtest": {"k": 3}
}"#;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_i2e")
}

/// Runs `i2e` with a clean environment for the variables it reads.
pub fn i2e(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("I2E_CACHE_DIR")
        .env_remove("I2E_DATA_URL")
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn i2e")
}

pub fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

pub const STAGES: [&[&str]; 9] = [
    &["ingest"],
    &["stats"],
    &["featurize"],
    &["pretrain"],
    &["finetune", "--from-weights", "@models", "--baseline"],
    &["train-gbt"],
    &["evaluate"],
    &["backtest"],
    &["predict"],
];

/// Writes `config` into `dir` and runs every stage into `dir/out`. Returns
/// the output directory and each stage's stdout.
pub fn full_pipeline(dir: &Path, config: &str) -> Result<(PathBuf, Vec<String>), String> {
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, config).map_err(|e| e.to_string())?;
    let out = dir.join("out");
    let models = out.join("models");
    let mut stdout = Vec::new();
    for stage in STAGES {
        let mut args: Vec<&str> = vec!["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend(stage.iter().map(|a| if *a == "@models" { models.to_str().unwrap() } else { a }));
        let o = i2e(&args);
        if !o.status.success() {
            return Err(format!("{:?} exited {:?}: {}", stage, o.status.code(), text(&o)));
        }
        stdout.push(String::from_utf8_lossy(&o.stdout).into_owned());
    }
    Ok((out, stdout))
}

/// Relative path → bytes for every file under `root`.
pub fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Files present in only one tree or with different bytes.
pub fn tree_differences(a: &Path, b: &Path) -> Vec<String> {
    let (ta, tb) = (tree_bytes(a), tree_bytes(b));
    let names: std::collections::BTreeSet<&String> = ta.keys().chain(tb.keys()).collect();
    names.into_iter().filter(|k| ta.get(*k) != tb.get(*k)).cloned().collect()
}
