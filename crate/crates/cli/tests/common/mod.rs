#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const COMMANDS: [&str; 7] = ["parse-case", "simulate", "attack", "detect", "sweep", "theory", "partial"];

/// Small enough that every command finishes in a few seconds.
pub const FAST_CONFIG: &str = r#"{
  "total_samples": 300,
  "train": {"epochs": 15},
  "sigma_grid": [0.02, 0.05],
  "kappa_grid": [1.0, 2.0],
  "theory": {
    "trials": 10,
    "t_star": 200,
    "sigmas": [0.02, 0.1],
    "covariance_trials": 200,
    "mcb_trials": 5,
    "random_bases": 5
  }
}"#;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

pub fn cyclespace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclespace"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs `command` on the 14-bus case with the fast config into `out`.
pub fn run_fast(dir: &Path, command: &str, seed: u64, out: &Path) -> Output {
    let config = dir.join("fast.json");
    std::fs::write(&config, FAST_CONFIG).unwrap();
    let case = fixture("case14.m");
    let seed = seed.to_string();
    cyclespace(&[
        command,
        "--case",
        case.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--seed",
        &seed,
        "--out",
        out.to_str().unwrap(),
    ])
}

/// File name to contents for every file in `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}
