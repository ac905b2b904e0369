//! Inputs shared by the benchmarks.

use std::path::Path;

use cyclespace::case::{read_case_file, LoadProfile};
use cyclespace::sim::{build_h, generate_measurements, simulate_states, NoiseModel};
use cyclespace::GridCase;
use nalgebra::DMatrix;

/// One of the IEEE fixtures shipped with the core crate, e.g. `"case30"`.
pub fn fixture(name: &str) -> GridCase {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../core/fixtures/{name}.m"));
    read_case_file(&path).expect("fixture parses")
}

/// `t` noisy load-driven measurements at σ = 0.02.
pub fn measurements(case: &GridCase, t: usize) -> DMatrix<f64> {
    let h = build_h(case);
    let states = simulate_states(case, &LoadProfile::synthetic(t, 1), t, 0.1, 2).expect("states solve");
    let noise = NoiseModel::homoscedastic(h.m(), 0.02).expect("valid sigma");
    generate_measurements(&h, &states, &noise, 3).expect("dimensions agree").z
}
