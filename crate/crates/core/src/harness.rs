//! End-to-end experiment runs: single scenarios, (κ, σ) sweeps, theory
//! validation and partial-observability comparisons.
//!
//! Everything is a pure function of the config, the case and the seed.
//! Writers prefix every CSV with `# config_hash=<sha256>` and finish each
//! run with a `manifest_<command>.json` listing the files and their digests.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    ae_residual_attack, lowrank_svd_attack, model_based_fdia, pca_blind_attack, train_autoencoder, AttackFamily,
    AttackScenario, TrainConfig, TrainedAutoencoder,
};
use crate::case::{write_json_case, GridCase, LoadProfile};
use crate::csd::{
    detect, fit_bank, mask_observability, svd_baseline_detect, DetectOptions, DetectionReport, Metrics, SupportClass,
    Trace, DEFAULT_SEPARATION,
};
use crate::error::{Error, Result};
use crate::estimation::{chi2_threshold, WlsEstimator};
use crate::graph::{build_graph, fundamental_cycle_basis, minimum_cycle_basis, BasisKind, CycleBasis, OrientedGraph};
use crate::rng::{child_seed, substream};
use crate::sim::{build_h, generate_measurements, simulate_states, JacobianH, MeasurementSeries, NoiseModel};
use crate::theory::{
    basis_comparison_csv, egen_monte_carlo, err_covariance_check, gen_error_csv, mcb_optimality_experiment,
    BasisComparisonRow, GenErrorEstimate, MonteCarloConfig,
};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Parse,
    Simulate,
    Train,
    Attack,
    Fit,
    Detect,
    Theory,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Parse => "parse",
            Stage::Simulate => "simulate",
            Stage::Train => "train",
            Stage::Attack => "attack",
            Stage::Fit => "fit",
            Stage::Detect => "detect",
            Stage::Theory => "theory",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    /// 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.source.is_numerical() {
            3
        } else {
            2
        }
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Csd,
    Svd,
    Bdd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub trials: usize,
    pub t_star: usize,
    pub sigmas: Vec<f64>,
    /// Training samples; `2m` when unset.
    pub t_o: Option<usize>,
    pub covariance_trials: usize,
    pub covariance_sigma: f64,
    pub mcb_sigma: f64,
    pub mcb_trials: usize,
    pub random_bases: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            trials: 100,
            t_star: 1000,
            sigmas: vec![0.01, 0.02, 0.05, 0.1, 0.5, 1.0, 3.0],
            t_o: None,
            covariance_trials: 2000,
            covariance_sigma: 0.01,
            mcb_sigma: 0.02,
            mcb_trials: 100,
            random_bases: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialMask {
    pub name: String,
    pub removed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub case: Option<PathBuf>,
    pub total_samples: usize,
    /// Leading attack-free share of the series used for training.
    pub train_fraction: f64,
    /// Detector fitting samples, taken from the end of the training segment;
    /// the whole segment when unset.
    pub t_o: Option<usize>,
    /// Attack window relative to the evaluation segment; the middle third
    /// when unset.
    pub window: Option<(usize, usize)>,
    pub sigma: f64,
    pub kappa: f64,
    pub sigma_grid: Vec<f64>,
    pub kappa_grid: Vec<f64>,
    pub family: AttackFamily,
    pub gamma: f64,
    /// Direction `u` for the model-based family; random when unset.
    pub direction: Option<Vec<f64>>,
    pub basis: BasisKind,
    pub detectors: Vec<DetectorKind>,
    pub alpha: f64,
    pub jitter: f64,
    pub separation: f64,
    pub gate_on_separability: bool,
    pub train: TrainConfig,
    pub theory: TheoryConfig,
    /// Masks for the partial-observability run; picked from the MCB when
    /// unset.
    pub partial_masks: Option<Vec<PartialMask>>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            case: None,
            total_samples: 1500,
            train_fraction: 0.6,
            t_o: None,
            window: None,
            sigma: 0.02,
            kappa: 1.0,
            sigma_grid: vec![0.005, 0.01, 0.02, 0.05, 0.1],
            kappa_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            family: AttackFamily::AeBlind,
            gamma: 0.1,
            direction: None,
            basis: BasisKind::Minimum,
            detectors: vec![DetectorKind::Csd, DetectorKind::Svd, DetectorKind::Bdd],
            alpha: 0.05,
            jitter: 0.1,
            separation: DEFAULT_SEPARATION,
            gate_on_separability: false,
            train: TrainConfig::default(),
            theory: TheoryConfig::default(),
            partial_masks: None,
            seed: 0,
        }
    }
}

/// Sample layout of one run: `[0, t_train)` trains, `[t_train, total)` is
/// evaluated, the window holds the attack (absolute indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub total: usize,
    pub t_train: usize,
    pub t_o: usize,
    pub window: (usize, usize),
}

impl Layout {
    pub fn eval_len(&self) -> usize {
        self.total - self.t_train
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn layout(&self) -> Result<Layout> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        let total = self.total_samples;
        let t_train = (total as f64 * self.train_fraction).floor() as usize;
        if t_train == 0 || t_train >= total {
            return Err(Error::InvalidParameter(format!(
                "{total} samples leave no training or evaluation segment"
            )));
        }
        let eval = total - t_train;
        let t_o = self.t_o.unwrap_or(t_train);
        if t_o == 0 || t_o > t_train {
            return Err(Error::InvalidParameter(format!(
                "T_o = {t_o} must lie in 1..={t_train}"
            )));
        }
        let (ws, we) = self.window.unwrap_or((eval / 3, 2 * eval / 3));
        if ws > we || we > eval {
            return Err(Error::InvalidParameter(format!(
                "window [{ws}, {we}) outside the {eval}-sample evaluation segment"
            )));
        }
        Ok(Layout {
            total,
            t_train,
            t_o,
            window: (t_train + ws, t_train + we),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        if self.sigma_grid.is_empty() || self.kappa_grid.is_empty() {
            return Err(Error::InvalidParameter("sweep grids must be nonempty".into()));
        }
        let bad = |v: &f64| !(v.is_finite() && *v >= 0.0);
        if bad(&self.sigma) || self.sigma_grid.iter().any(bad) {
            return Err(Error::InvalidParameter("noise levels must be finite and nonnegative".into()));
        }
        if bad(&self.kappa) || self.kappa_grid.iter().any(bad) {
            return Err(Error::InvalidParameter("attack magnitudes must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidParameter(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.detectors.is_empty() {
            return Err(Error::InvalidParameter("no detector enabled".into()));
        }
        self.train.validate()
    }

    fn enabled(&self, d: DetectorKind) -> bool {
        self.detectors.contains(&d)
    }

    fn detect_options(&self) -> DetectOptions {
        DetectOptions {
            separation: self.separation,
            gate_on_separability: self.gate_on_separability,
            ..DetectOptions::default()
        }
    }
}

/// SHA-256 over the resolved config and the case, as lowercase hex.
pub fn config_hash(cfg: &ExperimentConfig, case: &GridCase) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(cfg).expect("config serializes").as_bytes());
    hasher.update(b"\n");
    hasher.update(write_json_case(case).as_bytes());
    hex_digest(hasher)
}

fn hex_digest(hasher: Sha256) -> String {
    hasher.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_digest(hasher)
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

/// Collects the files of one command and writes them with a manifest.
pub struct ArtifactWriter {
    dir: PathBuf,
    command: String,
    hash: String,
    files: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    command: String,
    config_hash: String,
    files: BTreeMap<String, String>,
}

impl ArtifactWriter {
    /// Fails when `dir` already holds results of this command under a
    /// different config hash.
    pub fn new(dir: &Path, command: &str, hash: &str) -> StageResult<Self> {
        let manifest = dir.join(format!("manifest_{command}.json"));
        if manifest.exists() {
            let text = std::fs::read_to_string(&manifest).map_err(Error::from).at(Stage::Write)?;
            let old: Manifest = serde_json::from_str(&text).map_err(Error::from).at(Stage::Write)?;
            if old.config_hash != hash {
                return Err(StageError {
                    stage: Stage::Config,
                    source: Error::Schema(format!(
                        "{} holds {command} results for config {}, not {hash}",
                        dir.display(),
                        old.config_hash
                    )),
                });
            }
        }
        std::fs::create_dir_all(dir).map_err(Error::from).at(Stage::Write)?;
        Ok(ArtifactWriter {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            hash: hash.to_string(),
            files: BTreeMap::new(),
        })
    }

    pub fn header(&self) -> String {
        format!("# config_hash={}", self.hash)
    }

    fn put(&mut self, name: &str, content: String) -> StageResult<()> {
        std::fs::write(self.dir.join(name), content.as_bytes())
            .map_err(Error::from)
            .at(Stage::Write)?;
        self.files.insert(name.to_string(), sha256_hex(content.as_bytes()));
        Ok(())
    }

    pub fn csv(&mut self, name: &str, body: &str) -> StageResult<()> {
        let content = format!("{}\n{body}", self.header());
        self.put(name, content)
    }

    /// JSON artifacts carry the hash in the manifest only.
    pub fn json(&mut self, name: &str, body: String) -> StageResult<()> {
        self.put(name, body)
    }

    pub fn finish(self) -> StageResult<PathBuf> {
        let path = self.dir.join(format!("manifest_{}.json", self.command));
        let manifest = Manifest {
            command: self.command,
            config_hash: self.hash,
            files: self.files,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(Error::from).at(Stage::Write)?;
        std::fs::write(&path, text).map_err(Error::from).at(Stage::Write)?;
        Ok(path)
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Cycle index, `aggregate`, `svd` or `bdd`.
    pub detector: String,
    pub kappa: f64,
    pub sigma: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Attack substream of the cell, or the stored series' seed when
    /// detecting on loaded data.
    pub seed: u64,
}

impl MetricRow {
    fn new(detector: impl Into<String>, kappa: f64, sigma: f64, m: &Metrics, seed: u64) -> Self {
        MetricRow {
            detector: detector.into(),
            kappa,
            sigma,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            seed,
        }
    }
}

pub fn metric_rows_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("detector,kappa,sigma,precision,recall,f1,seed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.detector, r.kappa, r.sigma, r.precision, r.recall, r.f1, r.seed
        );
    }
    out
}

/// BDD alarms over a block of measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BddTrace {
    pub lnr: Vec<f64>,
    pub threshold: f64,
    pub flags: Vec<bool>,
    pub metrics: Metrics,
}

pub fn bdd_trace(h: &JacobianH, sigma: f64, z: &DMatrix<f64>, labels: &[bool], alpha: f64) -> Result<BddTrace> {
    let est = WlsEstimator::new(h, &NoiseModel::homoscedastic(h.m(), sigma)?)?;
    let threshold = chi2_threshold(est.dof(), alpha)?;
    let lnr = est.lnr_series(z);
    let flags: Vec<bool> = lnr.iter().map(|&l| l >= threshold).collect();
    let metrics = Metrics::from_flags(&flags, labels);
    Ok(BddTrace {
        lnr,
        threshold,
        flags,
        metrics,
    })
}

impl BddTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,lnr,threshold,flagged\n");
        for (t, (l, f)) in self.lnr.iter().zip(&self.flags).enumerate() {
            let _ = writeln!(out, "{t},{l},{},{}", self.threshold, u8::from(*f));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Pipeline pieces
// ---------------------------------------------------------------------------

fn basis_of(graph: &OrientedGraph, kind: BasisKind) -> Result<CycleBasis> {
    match kind {
        BasisKind::Minimum => minimum_cycle_basis(graph, None),
        BasisKind::Fundamental => Ok(fundamental_cycle_basis(graph)),
    }
}

/// Seeds of one noise level: states are shared by every level, noise and
/// attacks are not.
#[derive(Debug, Clone, Copy)]
struct Seeds {
    profile: u64,
    states: u64,
    noise: u64,
    train: u64,
    attack: u64,
}

impl Seeds {
    fn for_sigma(seed: u64, sigma_index: usize) -> Self {
        let level = child_seed(child_seed(seed, 0x5157), sigma_index as u64);
        Seeds {
            profile: child_seed(seed, 1),
            states: child_seed(seed, 2),
            noise: child_seed(level, 0),
            train: child_seed(level, 1),
            attack: child_seed(level, 2),
        }
    }

    fn attack_cell(&self, kappa_index: usize) -> u64 {
        child_seed(self.attack, kappa_index as u64)
    }
}

/// Clean-operation data and trained models for one noise level.
struct Level {
    sigma: f64,
    series: MeasurementSeries,
    autoencoder: Option<TrainedAutoencoder>,
}

fn simulate_series(
    cfg: &ExperimentConfig,
    case: &GridCase,
    h: &JacobianH,
    sigma: f64,
    seeds: Seeds,
    layout: &Layout,
) -> StageResult<MeasurementSeries> {
    let profile = LoadProfile::synthetic(layout.total, seeds.profile);
    let states = simulate_states(case, &profile, layout.total, cfg.jitter, seeds.states).at(Stage::Simulate)?;
    let noise = NoiseModel::homoscedastic(h.m(), sigma).at(Stage::Simulate)?;
    let mut series = generate_measurements(h, &states, &noise, seeds.noise).at(Stage::Simulate)?;
    series.case_name = case.case_name.clone();
    Ok(series)
}

fn simulate_level(cfg: &ExperimentConfig, case: &GridCase, h: &JacobianH, sigma: f64, seeds: Seeds) -> StageResult<Level> {
    let layout = cfg.layout().at(Stage::Config)?;
    let series = simulate_series(cfg, case, h, sigma, seeds, &layout)?;
    let autoencoder = if cfg.family == AttackFamily::AeBlind {
        let history = series.z.columns(0, layout.t_train).into_owned();
        let train_cfg = TrainConfig {
            seed: seeds.train,
            ..cfg.train.clone()
        };
        Some(train_autoencoder(&history, h.n_states(), &train_cfg).at(Stage::Train)?)
    } else {
        None
    };
    Ok(Level {
        sigma,
        series,
        autoencoder,
    })
}

fn inject(cfg: &ExperimentConfig, h: &JacobianH, level: &Level, kappa: f64, seed: u64) -> StageResult<MeasurementSeries> {
    let layout = cfg.layout().at(Stage::Config)?;
    let mut sc = AttackScenario::new(cfg.family, kappa, layout.window, seed);
    sc.gamma = cfg.gamma;
    let history = level.series.z.columns(0, layout.t_train).into_owned();
    let attacked = match cfg.family {
        AttackFamily::ModelBased => {
            sc.direction = Some(match &cfg.direction {
                Some(u) => u.clone(),
                None => {
                    let mut rng = substream(seed, 0xD1);
                    (0..h.n_states()).map(|_| rng.sample(StandardNormal)).collect()
                }
            });
            model_based_fdia(&level.series, h, &sc)
        }
        AttackFamily::AeBlind => {
            let model = &level.autoencoder.as_ref().expect("trained for ae_blind").model;
            let noise = NoiseModel::homoscedastic(h.m(), level.sigma).at(Stage::Attack)?;
            ae_residual_attack(&level.series, model, &sc, &noise)
        }
        AttackFamily::PcaBlind => pca_blind_attack(&level.series, &history, h.n_states(), &sc),
        AttackFamily::LowrankBlind => lowrank_svd_attack(&level.series, &history, h.n_states(), &sc).map(|(s, _)| s),
    };
    attacked.at(Stage::Attack)
}

struct Evaluation {
    csd: Option<DetectionReport>,
    svd: Option<Trace>,
    bdd: Option<BddTrace>,
    labels: Vec<bool>,
}

impl Evaluation {
    fn rows(&self, kappa: f64, sigma: f64, seed: u64) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        if let Some(rep) = &self.csd {
            for c in &rep.per_cycle {
                rows.push(MetricRow::new(c.cycle_id.to_string(), kappa, sigma, &c.trace.metrics, seed));
            }
            rows.push(MetricRow::new("aggregate", kappa, sigma, &rep.aggregate.metrics, seed));
        }
        if let Some(t) = &self.svd {
            rows.push(MetricRow::new("svd", kappa, sigma, &t.metrics, seed));
        }
        if let Some(b) = &self.bdd {
            rows.push(MetricRow::new("bdd", kappa, sigma, &b.metrics, seed));
        }
        rows
    }
}

fn evaluate(
    cfg: &ExperimentConfig,
    h: &JacobianH,
    basis: &CycleBasis,
    sigma: f64,
    series: &MeasurementSeries,
) -> StageResult<Evaluation> {
    let layout = cfg.layout().at(Stage::Config)?;
    let train = series
        .z
        .columns(layout.t_train - layout.t_o, layout.t_o)
        .into_owned();
    let test = series.z.columns(layout.t_train, layout.eval_len()).into_owned();
    let labels = series.attacked()[layout.t_train..].to_vec();
    let opts = cfg.detect_options();
    let csd = if cfg.enabled(DetectorKind::Csd) {
        let bank = fit_bank(&train, basis).at(Stage::Fit)?;
        Some(detect(&bank, &test, &labels, &opts).at(Stage::Detect)?)
    } else {
        None
    };
    let svd = if cfg.enabled(DetectorKind::Svd) {
        Some(
            svd_baseline_detect(&train, &test, &labels, h.n_states(), &opts)
                .at(Stage::Detect)?
                .1,
        )
    } else {
        None
    };
    let bdd = if cfg.enabled(DetectorKind::Bdd) {
        Some(bdd_trace(h, sigma, &test, &labels, cfg.alpha).at(Stage::Detect)?)
    } else {
        None
    };
    Ok(Evaluation { csd, svd, bdd, labels })
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

/// Detector outputs on the evaluation segment.
pub struct DetectionOutcome {
    pub csd: Option<DetectionReport>,
    pub svd: Option<Trace>,
    pub bdd: Option<BddTrace>,
    pub labels: Vec<bool>,
    pub rows: Vec<MetricRow>,
}

impl DetectionOutcome {
    fn new(eval: Evaluation, kappa: f64, sigma: f64, seed: u64) -> Self {
        let rows = eval.rows(kappa, sigma, seed);
        DetectionOutcome {
            csd: eval.csd,
            svd: eval.svd,
            bdd: eval.bdd,
            labels: eval.labels,
            rows,
        }
    }

    pub fn write(&self, out: &mut ArtifactWriter) -> StageResult<()> {
        if let Some(rep) = &self.csd {
            out.csv("csd_scores.csv", &rep.scores_csv())?;
            out.json("csd.json", rep.summary_json("csd_scores.csv"))?;
        }
        if let Some(t) = &self.svd {
            let mut body = String::from("t,label,score,flagged\n");
            for (i, s) in t.scores.iter().enumerate() {
                let _ = writeln!(body, "{i},{},{s},{}", u8::from(self.labels[i]), u8::from(t.flags[i]));
            }
            out.csv("svd_scores.csv", &body)?;
        }
        if let Some(b) = &self.bdd {
            out.csv("bdd.csv", &b.to_csv())?;
        }
        out.csv("metrics.csv", &metric_rows_csv(&self.rows))
    }
}

pub struct ScenarioOutcome {
    pub attack: AttackOutcome,
    pub basis: CycleBasis,
    pub detection: DetectionOutcome,
}

impl ScenarioOutcome {
    pub fn write(&self, out: &mut ArtifactWriter) -> StageResult<()> {
        self.attack.write(out)?;
        out.json("basis.json", self.basis.to_json())?;
        if let Some(ae) = &self.attack.autoencoder {
            let mut loss = String::from("epoch,loss\n");
            for (i, l) in ae.loss_history.iter().enumerate() {
                let _ = writeln!(loss, "{i},{l}");
            }
            out.csv("training_loss.csv", &loss)?;
        }
        self.detection.write(out)
    }
}

/// Simulate, attack, fit on the attack-free head and detect on the rest.
pub fn run_scenario(cfg: &ExperimentConfig, case: &GridCase) -> StageResult<ScenarioOutcome> {
    let attack = run_attack(cfg, case)?;
    let h = build_h(case);
    let basis = basis_of(&build_graph(case), cfg.basis).at(Stage::Fit)?;
    let eval = evaluate(cfg, &h, &basis, cfg.sigma, &attack.attacked)?;
    let seed = Seeds::for_sigma(cfg.seed, 0).attack_cell(0);
    let detection = DetectionOutcome::new(eval, cfg.kappa, cfg.sigma, seed);
    Ok(ScenarioOutcome {
        attack,
        basis,
        detection,
    })
}

/// Detection on an already attacked series (labels from its sidecar).
pub fn detect_series(
    cfg: &ExperimentConfig,
    case: &GridCase,
    series: &MeasurementSeries,
) -> StageResult<DetectionOutcome> {
    cfg.validate().at(Stage::Config)?;
    let layout = cfg.layout().at(Stage::Config)?;
    if series.len() != layout.total || series.m() != case.n_branches() {
        return Err(StageError {
            stage: Stage::Config,
            source: Error::Dimension(format!(
                "series is {}×{}, config and case expect {}×{}",
                series.m(),
                series.len(),
                case.n_branches(),
                layout.total
            )),
        });
    }
    let h = build_h(case);
    let basis = basis_of(&build_graph(case), cfg.basis).at(Stage::Fit)?;
    let sigma = series.sigma.first().copied().unwrap_or(cfg.sigma);
    let eval = evaluate(cfg, &h, &basis, sigma, series)?;
    Ok(DetectionOutcome::new(eval, cfg.kappa, sigma, series.seed))
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub detector: String,
    /// `(kappa, sigma)` cells with `f1 >= threshold`.
    pub cells: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageEntry {
    pub detector: String,
    /// Cells in the detector's region but not in the aggregate's.
    pub outside_aggregate: Vec<(f64, f64)>,
    /// `outside_aggregate.len()` over the number of grid cells.
    pub fraction: f64,
}

pub struct SweepOutcome {
    pub rows: Vec<MetricRow>,
    pub failure: Option<StageError>,
}

pub const REGION_F1: f64 = 0.8;

pub fn regions(rows: &[MetricRow], threshold: f64) -> Vec<Region> {
    let mut names: Vec<String> = Vec::new();
    for r in rows {
        if !names.contains(&r.detector) {
            names.push(r.detector.clone());
        }
    }
    names
        .into_iter()
        .map(|d| Region {
            cells: rows
                .iter()
                .filter(|r| r.detector == d && r.f1 >= threshold)
                .map(|r| (r.kappa, r.sigma))
                .collect(),
            detector: d,
        })
        .collect()
}

/// For every single-cycle detector, the cells it covers that the aggregate
/// does not.
pub fn coverage(rows: &[MetricRow], threshold: f64) -> Vec<CoverageEntry> {
    let n_cells = rows.iter().filter(|r| r.detector == "aggregate").count().max(1);
    let regs = regions(rows, threshold);
    let agg = regs
        .iter()
        .find(|r| r.detector == "aggregate")
        .map(|r| r.cells.clone())
        .unwrap_or_default();
    regs.iter()
        .filter(|r| r.detector.parse::<usize>().is_ok())
        .map(|r| {
            let outside: Vec<(f64, f64)> = r.cells.iter().filter(|c| !agg.contains(c)).copied().collect();
            CoverageEntry {
                detector: r.detector.clone(),
                fraction: outside.len() as f64 / n_cells as f64,
                outside_aggregate: outside,
            }
        })
        .collect()
}

/// Adjacent κ pairs (at fixed σ) where F1 drops, and the number of pairs.
pub fn kappa_monotonicity(rows: &[MetricRow], detector: &str, kappas: &[f64]) -> (usize, usize) {
    let mut sorted = kappas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sigmas: Vec<f64> = rows.iter().filter(|r| r.detector == detector).map(|r| r.sigma).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    let f1 = |k: f64, s: f64| {
        rows.iter()
            .find(|r| r.detector == detector && r.kappa == k && r.sigma == s)
            .map(|r| r.f1)
    };
    let (mut drops, mut pairs) = (0, 0);
    for &s in &sigmas {
        for w in sorted.windows(2) {
            if let (Some(a), Some(b)) = (f1(w[0], s), f1(w[1], s)) {
                pairs += 1;
                if b < a {
                    drops += 1;
                }
            }
        }
    }
    (drops, pairs)
}

pub fn regions_json(rows: &[MetricRow]) -> String {
    serde_json::to_string_pretty(&serde_json::json!({
        "f1_threshold": REGION_F1,
        "regions": regions(rows, REGION_F1),
        "coverage": coverage(rows, REGION_F1),
    }))
    .expect("regions serialize")
}

/// Cartesian (κ, σ) grid. Each σ level simulates fresh noise and trains
/// its own attack model; each cell draws its own attack substream.
pub fn run_sweep(cfg: &ExperimentConfig, case: &GridCase) -> StageResult<SweepOutcome> {
    cfg.validate().at(Stage::Config)?;
    let h = build_h(case);
    let basis = basis_of(&build_graph(case), cfg.basis).at(Stage::Fit)?;
    let per_level: Vec<StageResult<Vec<MetricRow>>> = cfg
        .sigma_grid
        .par_iter()
        .enumerate()
        .map(|(si, &sigma)| {
            let seeds = Seeds::for_sigma(cfg.seed, si);
            let level = simulate_level(cfg, case, &h, sigma, seeds)?;
            let mut rows = Vec::new();
            for (ki, &kappa) in cfg.kappa_grid.iter().enumerate() {
                let seed = seeds.attack_cell(ki);
                let attacked = inject(cfg, &h, &level, kappa, seed)?;
                rows.extend(evaluate(cfg, &h, &basis, sigma, &attacked)?.rows(kappa, sigma, seed));
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    let mut failure = None;
    for r in per_level {
        match r {
            Ok(v) => rows.extend(v),
            Err(e) if failure.is_none() => failure = Some(e),
            Err(_) => {}
        }
    }
    // κ-major order regardless of how the levels were scheduled
    let order = |r: &MetricRow| {
        (
            cfg.kappa_grid.iter().position(|&k| k == r.kappa),
            cfg.sigma_grid.iter().position(|&s| s == r.sigma),
        )
    };
    rows.sort_by_key(|r| order(r));
    Ok(SweepOutcome { rows, failure })
}

impl SweepOutcome {
    pub fn write(&self, out: &mut ArtifactWriter) -> StageResult<()> {
        out.csv("sweep.csv", &metric_rows_csv(&self.rows))?;
        out.json("regions.json", regions_json(&self.rows))
    }
}

// ---------------------------------------------------------------------------
// Theory
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSummary {
    pub t_o: usize,
    pub sigma: f64,
    pub trials: usize,
    pub frobenius_rel_err: f64,
}

pub struct TheoryOutcome {
    pub gen_error: Vec<GenErrorEstimate>,
    pub covariance: CovarianceSummary,
    pub bases: Vec<BasisComparisonRow>,
}

pub fn run_theory(cfg: &ExperimentConfig, case: &GridCase) -> StageResult<TheoryOutcome> {
    let th = &cfg.theory;
    let h = build_h(case);
    if h.nullity() == 0 {
        return Err(StageError {
            stage: Stage::Theory,
            source: Error::NullityZero(format!("{} has no cycles", case.case_name)),
        });
    }
    let t_o = th.t_o.unwrap_or(2 * h.m());
    let mc = MonteCarloConfig {
        trials: th.trials,
        t_star: th.t_star,
        sigmas: th.sigmas.clone(),
        seed: child_seed(cfg.seed, 0x7E0),
    };
    let gen_error = egen_monte_carlo(&h, &mc, t_o).at(Stage::Theory)?;
    let cov = err_covariance_check(
        &h,
        t_o,
        th.covariance_sigma,
        th.covariance_trials,
        child_seed(cfg.seed, 0xC0F),
    )
    .at(Stage::Theory)?;
    let bases = mcb_optimality_experiment(
        case,
        t_o,
        th.mcb_sigma,
        th.mcb_trials,
        th.random_bases,
        th.t_star,
        child_seed(cfg.seed, 0xB45),
    )
    .at(Stage::Theory)?;
    Ok(TheoryOutcome {
        gen_error,
        covariance: CovarianceSummary {
            t_o,
            sigma: th.covariance_sigma,
            trials: th.covariance_trials,
            frobenius_rel_err: cov.frobenius_rel_err,
        },
        bases,
    })
}

impl TheoryOutcome {
    pub fn write(&self, out: &mut ArtifactWriter) -> StageResult<()> {
        out.csv("gen_error.csv", &gen_error_csv(&self.gen_error))?;
        out.csv("mcb_table.csv", &basis_comparison_csv(&self.bases))?;
        out.json(
            "covariance.json",
            serde_json::to_string_pretty(&self.covariance).expect("summary serializes"),
        )
    }
}

// ---------------------------------------------------------------------------
// Partial observability
// ---------------------------------------------------------------------------

/// One branch exclusive to the shortest MCB cycle and one exclusive to the
/// longest (lowest ids on ties). A cycle with no exclusive branch gives up
/// its lowest branch.
pub fn default_partial_masks(graph: &OrientedGraph) -> Result<Vec<PartialMask>> {
    let basis = minimum_cycle_basis(graph, None)?;
    if basis.cycles.is_empty() {
        return Err(Error::NullityZero("the grid has no cycles to mask".into()));
    }
    let exclusive = |i: usize| {
        let c = &basis.cycles[i];
        let mut edges = c.sorted_edges();
        edges.sort_unstable();
        edges
            .iter()
            .copied()
            .find(|e| basis.cycles.iter().enumerate().all(|(j, o)| j == i || !o.contains(*e)))
            .unwrap_or(edges[0])
    };
    let lens = basis.lengths();
    let small = (0..lens.len()).min_by_key(|&i| (lens[i], i)).expect("nonempty");
    let large = (0..lens.len()).max_by_key(|&i| (lens[i], std::cmp::Reverse(i))).expect("nonempty");
    Ok(vec![
        PartialMask {
            name: "missed_small_cycle".into(),
            removed: vec![exclusive(small)],
        },
        PartialMask {
            name: "missed_large_cycle".into(),
            removed: vec![exclusive(large)],
        },
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub name: String,
    pub removed: Vec<usize>,
    pub n_cycles: usize,
    pub covered_branches: Vec<usize>,
    /// Where the attacked branches of the center cell fall.
    pub support_class: SupportClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialRow {
    pub scenario: String,
    pub kappa: f64,
    pub sigma: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub seed: u64,
    /// False when the mask leaves no cycle to detect with.
    pub observable: bool,
}

pub struct PartialOutcome {
    pub masks: Vec<MaskSummary>,
    pub rows: Vec<PartialRow>,
}

pub const FULL_OBSERVABILITY: &str = "baseline";

impl PartialOutcome {
    /// F1 of `scenario` per grid cell in row order.
    pub fn surface(&self, scenario: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.scenario == scenario).map(|r| r.f1).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,kappa,sigma,precision,recall,f1,seed,observable\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.scenario,
                r.kappa,
                r.sigma,
                r.precision,
                r.recall,
                r.f1,
                r.seed,
                u8::from(r.observable)
            );
        }
        out
    }

    pub fn write(&self, out: &mut ArtifactWriter) -> StageResult<()> {
        out.csv("partial.csv", &self.to_csv())?;
        out.json(
            "masks.json",
            serde_json::to_string_pretty(&self.masks).expect("masks serialize"),
        )
    }
}

/// Aggregated CSD over the sweep grid with full observability and with each
/// mask's branches unmeasured.
pub fn run_partial(cfg: &ExperimentConfig, case: &GridCase, masks: &[PartialMask]) -> StageResult<PartialOutcome> {
    cfg.validate().at(Stage::Config)?;
    let h = build_h(case);
    let graph = build_graph(case);
    let mut scenarios: Vec<(String, Vec<usize>, CycleBasis)> =
        vec![(FULL_OBSERVABILITY.to_string(), Vec::new(), minimum_cycle_basis(&graph, None).at(Stage::Fit)?)];
    let mut covered = Vec::new();
    for mask in masks {
        let obs = mask_observability(&graph, &mask.removed).at(Stage::Config)?;
        covered.push(obs.clone());
        scenarios.push((mask.name.clone(), mask.removed.clone(), obs.basis));
    }
    let layout = cfg.layout().at(Stage::Config)?;
    let opts = cfg.detect_options();

    let per_level: Vec<StageResult<(Vec<PartialRow>, Vec<usize>)>> = cfg
        .sigma_grid
        .par_iter()
        .enumerate()
        .map(|(si, &sigma)| {
            let seeds = Seeds::for_sigma(cfg.seed, si);
            let level = simulate_level(cfg, case, &h, sigma, seeds)?;
            let train = level
                .series
                .z
                .columns(layout.t_train - layout.t_o, layout.t_o)
                .into_owned();
            let banks = scenarios
                .iter()
                .map(|(_, _, b)| {
                    if b.cycles.is_empty() {
                        Ok(None)
                    } else {
                        fit_bank(&train, b).map(Some)
                    }
                })
                .collect::<Result<Vec<_>>>()
                .at(Stage::Fit)?;
            let mut rows = Vec::new();
            let mut support = Vec::new();
            for (ki, &kappa) in cfg.kappa_grid.iter().enumerate() {
                let seed = seeds.attack_cell(ki);
                let attacked = inject(cfg, &h, &level, kappa, seed)?;
                if support.is_empty() {
                    support = attacked_branches(&level.series, &attacked, layout.window);
                }
                let test = attacked.z.columns(layout.t_train, layout.eval_len()).into_owned();
                let labels = attacked.attacked()[layout.t_train..].to_vec();
                for ((name, _, _), bank) in scenarios.iter().zip(&banks) {
                    let (m, observable) = match bank {
                        Some(bank) => {
                            let rep = detect(bank, &test, &labels, &opts).at(Stage::Detect)?;
                            (rep.aggregate.metrics, true)
                        }
                        None => (Metrics::from_flags(&vec![false; labels.len()], &labels), false),
                    };
                    rows.push(PartialRow {
                        scenario: name.clone(),
                        kappa,
                        sigma,
                        precision: m.precision,
                        recall: m.recall,
                        f1: m.f1,
                        seed,
                        observable,
                    });
                }
            }
            Ok((rows, support))
        })
        .collect();

    let mut rows = Vec::new();
    let mut support = Vec::new();
    for r in per_level {
        let (v, s) = r?;
        if support.is_empty() {
            support = s;
        }
        rows.extend(v);
    }
    let order = |r: &PartialRow| {
        (
            scenarios.iter().position(|(n, _, _)| *n == r.scenario),
            cfg.kappa_grid.iter().position(|&k| k == r.kappa),
            cfg.sigma_grid.iter().position(|&s| s == r.sigma),
        )
    };
    rows.sort_by_key(|r| order(r));
    let masks = masks
        .iter()
        .zip(&covered)
        .map(|(mask, obs)| MaskSummary {
            name: mask.name.clone(),
            removed: mask.removed.clone(),
            n_cycles: obs.basis.len(),
            covered_branches: obs.covered_branches(),
            support_class: obs.classify(&support),
        })
        .collect();
    Ok(PartialOutcome { masks, rows })
}

fn attacked_branches(clean: &MeasurementSeries, attacked: &MeasurementSeries, window: (usize, usize)) -> Vec<usize> {
    let d = &attacked.z - &clean.z;
    (0..d.nrows())
        .filter(|&i| (window.0..window.1).any(|t| d[(i, t)] != 0.0))
        .collect()
}

pub struct AttackOutcome {
    pub layout: Layout,
    pub clean: MeasurementSeries,
    pub attacked: MeasurementSeries,
    pub autoencoder: Option<TrainedAutoencoder>,
}

/// Simulation and injection of a scenario, without detection.
pub fn run_attack(cfg: &ExperimentConfig, case: &GridCase) -> StageResult<AttackOutcome> {
    cfg.validate().at(Stage::Config)?;
    let h = build_h(case);
    let seeds = Seeds::for_sigma(cfg.seed, 0);
    let level = simulate_level(cfg, case, &h, cfg.sigma, seeds)?;
    let attacked = inject(cfg, &h, &level, cfg.kappa, seeds.attack_cell(0))?;
    Ok(AttackOutcome {
        layout: cfg.layout().at(Stage::Config)?,
        clean: level.series,
        attacked,
        autoencoder: level.autoencoder,
    })
}

impl AttackOutcome {
    pub fn write(&self, out: &mut ArtifactWriter) -> StageResult<()> {
        out.csv("clean.csv", &self.clean.to_csv())?;
        out.json("clean.json", self.clean.sidecar_json())?;
        out.csv("attacked.csv", &self.attacked.to_csv())?;
        out.json("attacked.json", self.attacked.sidecar_json())?;
        if let Some(ae) = &self.autoencoder {
            out.json("autoencoder.json", ae.model.to_json())?;
        }
        Ok(())
    }
}

/// Clean measurements only.
pub fn run_simulate(cfg: &ExperimentConfig, case: &GridCase) -> StageResult<MeasurementSeries> {
    cfg.validate().at(Stage::Config)?;
    let layout = cfg.layout().at(Stage::Config)?;
    let h = build_h(case);
    simulate_series(cfg, case, &h, cfg.sigma, Seeds::for_sigma(cfg.seed, 0), &layout)
}
