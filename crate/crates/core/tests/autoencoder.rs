use cyclespace::attack::{ae_residual_attack, train_autoencoder, AttackFamily, AttackScenario, MlpAutoencoder, TrainConfig};
use cyclespace::case::{read_case_file, LoadProfile};
use cyclespace::estimation::{chi2_threshold, WlsEstimator};
use cyclespace::sim::{build_h, generate_measurements, simulate_states, JacobianH, NoiseModel};
use nalgebra::DMatrix;

fn h14() -> (cyclespace::GridCase, JacobianH) {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/case14.m");
    let case = read_case_file(&path).unwrap();
    let h = build_h(&case);
    (case, h)
}

fn per_entry_mse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm_squared() / a.len() as f64
}

#[test]
fn noise_free_subspace_is_learned() {
    let (case, h) = h14();
    let states = simulate_states(&case, &LoadProfile::synthetic(1500, 20), 1500, 0.1, 21).unwrap();
    let flows = &h.matrix * states;
    let (train, held_out) = (flows.columns(0, 900).into_owned(), flows.columns(900, 600).into_owned());
    // at the default rate 300 epochs stop near 2e-4
    let cfg = TrainConfig {
        seed: 1,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let ae = train_autoencoder(&train, h.n_states(), &cfg).unwrap();
    let mse = per_entry_mse(&ae.model.reconstruct(&held_out), &held_out);
    assert!(mse <= 1e-4, "held-out mse {mse:.3e}");
}

#[test]
fn noisy_training_denoises_and_is_reproducible() {
    let (case, h) = h14();
    let sigma = 0.02;
    let noise = NoiseModel::homoscedastic(h.m(), sigma).unwrap();
    let states = simulate_states(&case, &LoadProfile::synthetic(1500, 2), 1500, 0.1, 3).unwrap();
    let series = generate_measurements(&h, &states, &noise, 4).unwrap();
    let train = series.z.columns(0, 900).into_owned();
    let cfg = TrainConfig { seed: 9, ..TrainConfig::default() };
    let a = train_autoencoder(&train, h.n_states(), &cfg).unwrap();
    let b = train_autoencoder(&train, h.n_states(), &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.loss_history, b.loss_history);

    let held_out = series.z.columns(900, 600).into_owned();
    let mse = a.model.mse(&held_out);
    assert!(mse <= 2.0 * sigma * sigma, "held-out mse {mse:.3e}");

    // full-set loss: final below half the initial, transient rises at most 5%
    let loss = &a.loss_history;
    assert!(a.final_loss() < loss[0] / 2.0);
    for w in loss.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{} -> {}", w[0], w[1]);
    }

    let restored = MlpAutoencoder::from_json(&a.model.to_json()).unwrap();
    assert_eq!(restored.reconstruct(&held_out), a.model.reconstruct(&held_out));
}

#[test]
fn residual_attack_lives_off_the_measurement_manifold() {
    let (case, h) = h14();
    let sigma = 0.02;
    let noise = NoiseModel::homoscedastic(h.m(), sigma).unwrap();
    let states = simulate_states(&case, &LoadProfile::synthetic(1500, 5), 1500, 0.1, 6).unwrap();
    let series = generate_measurements(&h, &states, &noise, 7).unwrap();
    let train = series.z.columns(0, 900).into_owned();
    let model = train_autoencoder(&train, h.n_states(), &TrainConfig { seed: 8, ..TrainConfig::default() })
        .unwrap()
        .model;
    let window = (1100, 1300);
    let sc = AttackScenario::new(AttackFamily::AeBlind, 1.0, window, 10);
    let attacked = ae_residual_attack(&series, &model, &sc, &noise).unwrap();

    let p = h.complement_projector().unwrap();
    let delta = &attacked.z - &series.z;
    let frac: f64 = (window.0..window.1)
        .map(|t| {
            let d = delta.column(t);
            (&p * d).norm() / d.norm()
        })
        .sum::<f64>()
        / (window.1 - window.0) as f64;
    assert!(frac >= 0.5, "off-manifold fraction {frac:.3}");

    // outside the window nothing moves
    assert_eq!(attacked.z.columns(0, window.0), series.z.columns(0, window.0));
    assert_eq!(attacked.z.columns(window.1, 200), series.z.columns(window.1, 200));

    // frozen observation: the residual amplifies the off-manifold noise, so
    // the BDD sees it (LNR grows roughly by (1 + κ)²)
    let est = WlsEstimator::new(&h, &noise).unwrap();
    let tau = chi2_threshold(est.dof(), 0.05).unwrap();
    let mean = |z: &DMatrix<f64>| {
        let l = est.lnr_series(&z.columns(window.0, window.1 - window.0).into_owned());
        l.iter().sum::<f64>() / l.len() as f64
    };
    let (before, after) = (mean(&series.z), mean(&attacked.z));
    assert!(before < tau && after > tau, "mean LNR {before:.2} -> {after:.2}, tau {tau:.2}");
    assert!(after / before > 2.0 && after / before < 5.0, "{}", after / before);
}
