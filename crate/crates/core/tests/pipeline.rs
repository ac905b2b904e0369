use std::path::Path;

use cyclespace::case::read_case_file;
use cyclespace::harness::{
    config_hash, kappa_monotonicity, run_scenario, run_sweep, ArtifactWriter, ExperimentConfig,
};
use cyclespace::sim::{build_h, MeasurementSeries};
use cyclespace::theory::{egen_monte_carlo, MonteCarloConfig};
use cyclespace::GridCase;

fn case14() -> GridCase {
    read_case_file(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/case14.m")).unwrap()
}

#[test]
fn fourteen_bus_scenario_writes_reports_and_covers_the_window() {
    let case = case14();
    let cfg = ExperimentConfig::default();
    let out = run_scenario(&cfg, &case).unwrap();
    let agg = out.detection.csd.as_ref().unwrap().aggregate.metrics;
    assert!(agg.recall >= 0.8, "aggregate covers {:.3} of the window", agg.recall);

    let dir = tempfile::tempdir().unwrap();
    let mut w = ArtifactWriter::new(dir.path(), "detect", &config_hash(&cfg, &case)).unwrap();
    out.write(&mut w).unwrap();
    w.finish().unwrap();
    for f in ["csd.json", "csd_scores.csv", "svd_scores.csv", "bdd.csv", "metrics.csv", "basis.json", "autoencoder.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let reloaded = MeasurementSeries::load(dir.path(), "attacked").unwrap();
    assert_eq!(reloaded.z, out.attack.attacked.z);
    assert_eq!(reloaded.attacked(), out.attack.attacked.attacked());
}

#[test]
fn sweep_f1_grows_with_attack_magnitude() {
    let cfg = ExperimentConfig::default();
    let out = run_sweep(&cfg, &case14()).unwrap();
    assert!(out.failure.is_none());
    assert_eq!(out.rows.len(), 25 * 10);
    for det in ["aggregate", "svd", "bdd"] {
        let (drops, pairs) = kappa_monotonicity(&out.rows, det, &cfg.kappa_grid);
        assert_eq!(pairs, 20);
        assert!(drops as f64 <= 0.1 * pairs as f64, "{det}: {drops} drops");
    }
    assert!(out.rows.iter().all(|r| (0.0..=1.0).contains(&r.f1)));
}

#[test]
fn monte_carlo_estimate_converges() {
    let h = build_h(&case14());
    let run = |trials| {
        let cfg = MonteCarloConfig {
            trials,
            t_star: 1000,
            sigmas: vec![0.05],
            seed: 17,
        };
        egen_monte_carlo(&h, &cfg, 40).unwrap().remove(0)
    };
    let (few, many) = (run(25), run(400));
    assert!(
        many.rel_dev <= few.rel_dev + 2.0 * few.std_err / few.e_gen_closed,
        "{} vs {}",
        many.rel_dev,
        few.rel_dev
    );
    assert!(many.rel_dev < 0.05);
}
