//! False-data-injection attacks: the exact model-based attack, an
//! autoencoder-driven blind attack, and PCA / low-rank SVD blind baselines.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::sim::{JacobianH, Label, MeasurementSeries, NoiseModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    ModelBased,
    AeBlind,
    PcaBlind,
    LowrankBlind,
}

/// Attack parameters. `window` is the half-open timestep range `[start, end)`
/// of the series being attacked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackScenario {
    pub family: AttackFamily,
    pub kappa: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub window: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_gamma() -> f64 {
    0.1
}

impl AttackScenario {
    pub fn new(family: AttackFamily, kappa: f64, window: (usize, usize), seed: u64) -> Self {
        AttackScenario {
            family,
            kappa,
            gamma: default_gamma(),
            window,
            direction: None,
            seed,
        }
    }

    /// `κ = 0` and `γ = 0` are accepted: the first leaves the series
    /// unchanged, the second is the unmasked attack.
    pub fn validate(&self, series_len: usize) -> Result<()> {
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(Error::InvalidParameter(format!("kappa {} must be >= 0", self.kappa)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidParameter(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        let (s, e) = self.window;
        if s > e || e > series_len {
            return Err(Error::InvalidParameter(format!(
                "window [{s}, {e}) outside series of length {series_len}"
            )));
        }
        Ok(())
    }

    fn expect_family(&self, family: AttackFamily) -> Result<()> {
        if self.family != family {
            return Err(Error::InvalidParameter(format!(
                "scenario family {:?} used with the {:?} attack",
                self.family, family
            )));
        }
        Ok(())
    }
}

/// Copies the series, adds `delta(t)` inside the window and labels those
/// timesteps as attacked.
fn inject(
    series: &MeasurementSeries,
    window: (usize, usize),
    mut delta: impl FnMut(usize) -> DVector<f64>,
) -> MeasurementSeries {
    let mut out = series.clone();
    for t in window.0..window.1 {
        let d = delta(t);
        let mut col = out.z.column_mut(t);
        col += d;
        out.labels[t] = Label::Attacked;
    }
    out
}

/// `z'ₜ = zₜ + κ H u` inside the window.
pub fn model_based_fdia(
    series: &MeasurementSeries,
    h: &JacobianH,
    scenario: &AttackScenario,
) -> Result<MeasurementSeries> {
    scenario.expect_family(AttackFamily::ModelBased)?;
    scenario.validate(series.len())?;
    let u = scenario
        .direction
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("model-based attack needs a direction u".into()))?;
    if u.len() != h.n_states() {
        return Err(Error::Dimension(format!(
            "direction has {} entries, H has {} states",
            u.len(),
            h.n_states()
        )));
    }
    let a = &h.matrix * DVector::from_column_slice(u) * scenario.kappa;
    Ok(inject(series, scenario.window, |_| a.clone()))
}

// ---------------------------------------------------------------------------
// Autoencoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    rows: usize,
    cols: usize,
    /// Row-major `rows × cols`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    relu: bool,
}

impl Dense {
    fn w(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.weights)
    }
}

/// Five dense encoder layers down to the latent code and five mirrored
/// decoder layers back to `m`. Hidden layers use ReLU; the latent and output
/// layers are linear. Inputs are standardized per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpAutoencoder {
    layers: Vec<Dense>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl MlpAutoencoder {
    /// Fresh He-initialized network.
    pub fn new<R: Rng + ?Sized>(m: usize, latent: usize, width: usize, rng: &mut R) -> Self {
        let dims = [m, width, width, width, width, latent, width, width, width, width, m];
        let layers = (0..10)
            .map(|l| {
                let (cols, rows) = (dims[l], dims[l + 1]);
                let std = (2.0 / cols as f64).sqrt();
                Dense {
                    rows,
                    cols,
                    weights: (0..rows * cols)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                    bias: vec![0.0; rows],
                    relu: l != 4 && l != 9,
                }
            })
            .collect();
        MlpAutoencoder {
            layers,
            mean: vec![0.0; m],
            scale: vec![1.0; m],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[4].rows
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].cols)
            .chain(self.layers.iter().map(|l| l.rows))
            .collect()
    }

    fn standardize(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = z.clone();
        for (i, mut row) in x.row_iter_mut().enumerate() {
            row.apply(|v| *v = (*v - self.mean[i]) / self.scale[i]);
        }
        x
    }

    /// Forward pass in standardized units; returns every layer's output.
    fn forward_std(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let mut a = layer.w() * acts.last().unwrap();
            for (mut col, _) in a.column_iter_mut().zip(0..) {
                for (v, b) in col.iter_mut().zip(&layer.bias) {
                    *v += b;
                    if layer.relu && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(a);
        }
        acts
    }

    /// `AE(z)` for every column, in original units.
    pub fn reconstruct(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = self.forward_std(&self.standardize(z)).pop().unwrap();
        for (i, mut row) in y.row_iter_mut().enumerate() {
            row.apply(|v| *v = *v * self.scale[i] + self.mean[i]);
        }
        y
    }

    /// Per-entry mean squared reconstruction error in original units.
    pub fn mse(&self, z: &DMatrix<f64>) -> f64 {
        (self.reconstruct(z) - z).norm_squared() / z.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: MlpAutoencoder =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if model.layers.len() != 10 {
            return Err(Error::Schema(format!(
                "expected 10 autoencoder layers, found {}",
                model.layers.len()
            )));
        }
        let dims = model.layer_dims();
        let ok = model.layers.windows(2).all(|p| p[0].rows == p[1].cols)
            && model
                .layers
                .iter()
                .all(|l| l.weights.len() == l.rows * l.cols && l.bias.len() == l.rows)
            && model.mean.len() == dims[0]
            && model.scale.len() == dims[0]
            && dims[10] == dims[0];
        if !ok {
            return Err(Error::Schema("inconsistent autoencoder layer dimensions".into()));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Hidden width; `None` means `max(16, m)`.
    pub width: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            learning_rate: 2e-4,
            batch_size: 50,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            width: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.epsilon > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.width.is_none_or(|w| w > 0);
        if !positive {
            return Err(Error::InvalidParameter(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedAutoencoder {
    pub model: MlpAutoencoder,
    /// Full-training-set loss (standardized units) before training and after
    /// every epoch.
    pub loss_history: Vec<f64>,
}

impl TrainedAutoencoder {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().unwrap()
    }
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamSlot {
    fn new(n: usize) -> Self {
        AdamSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig, t: i32) {
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            params[i] -= cfg.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Trains on the columns of `history` (`m × T`) by minibatch Adam on the mean
/// squared reconstruction error of standardized data.
pub fn train_autoencoder(
    history: &DMatrix<f64>,
    latent: usize,
    cfg: &TrainConfig,
) -> Result<TrainedAutoencoder> {
    cfg.validate()?;
    let (m, t_len) = history.shape();
    if t_len < cfg.batch_size {
        return Err(Error::InsufficientSamples(format!(
            "{t_len} training samples for batch size {}",
            cfg.batch_size
        )));
    }
    if latent == 0 || latent > m {
        return Err(Error::InvalidParameter(format!("latent dimension {latent} for {m} channels")));
    }
    let mut rng = rng::substream(cfg.seed, 0xAE);
    let width = cfg.width.unwrap_or(m.max(16));
    let mut model = MlpAutoencoder::new(m, latent, width, &mut rng);
    for (i, row) in history.row_iter().enumerate() {
        let mean = row.mean();
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t_len as f64;
        model.mean[i] = mean;
        model.scale[i] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let data = model.standardize(history);
    let full_loss = |model: &MlpAutoencoder| {
        let y = model.forward_std(&data).pop().unwrap();
        (y - &data).norm_squared() / data.len() as f64
    };

    let mut slots: Vec<(AdamSlot, AdamSlot)> = model
        .layers
        .iter()
        .map(|l| (AdamSlot::new(l.weights.len()), AdamSlot::new(l.bias.len())))
        .collect();
    let mut order: Vec<usize> = (0..t_len).collect();
    let mut loss_history = vec![full_loss(&model)];
    let mut step = 0i32;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = DMatrix::from_fn(m, batch.len(), |i, j| data[(i, batch[j])]);
            let acts = model.forward_std(&x);
            let scale = 2.0 / x.len() as f64;
            let mut delta = (acts.last().unwrap() - &x) * scale;
            step += 1;
            for l in (0..model.layers.len()).rev() {
                let layer = &model.layers[l];
                if layer.relu {
                    delta.zip_apply(&acts[l + 1], |d, a| {
                        if a <= 0.0 {
                            *d = 0.0
                        }
                    });
                }
                let grad_w = &delta * acts[l].transpose();
                let grad_b: Vec<f64> = delta.row_iter().map(|r| r.sum()).collect();
                let next = if l > 0 { Some(layer.w().transpose() * &delta) } else { None };
                // nalgebra is column-major; weights are stored row-major
                let grad_w_rows: Vec<f64> = grad_w.transpose().iter().copied().collect();
                let layer = &mut model.layers[l];
                slots[l].0.step(&mut layer.weights, &grad_w_rows, cfg, step);
                slots[l].1.step(&mut layer.bias, &grad_b, cfg, step);
                if let Some(n) = next {
                    delta = n;
                }
            }
        }
        let loss = full_loss(&model);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "reconstruction loss became {loss} at epoch {epoch}"
            )));
        }
        loss_history.push(loss);
    }
    log::debug!(
        "autoencoder trained: loss {:.3e} -> {:.3e}",
        loss_history[0],
        loss_history.last().unwrap()
    );
    Ok(TrainedAutoencoder { model, loss_history })
}

/// `z'ₜ = zₜ + κ (rₜ + ηₜ)` with `rₜ = zₜ - AE(zₜ)` and `ηₜ ~ N(0, γR)`.
pub fn ae_residual_attack(
    series: &MeasurementSeries,
    model: &MlpAutoencoder,
    scenario: &AttackScenario,
    noise: &NoiseModel,
) -> Result<MeasurementSeries> {
    scenario.expect_family(AttackFamily::AeBlind)?;
    scenario.validate(series.len())?;
    if model.input_dim() != series.m() || noise.m() != series.m() {
        return Err(Error::Dimension(format!(
            "model input {}, noise channels {}, series channels {}",
            model.input_dim(),
            noise.m(),
            series.m()
        )));
    }
    let (s, e) = scenario.window;
    let window = series.z.columns(s, e - s).into_owned();
    let residual = &window - model.reconstruct(&window);
    let mask = noise.scaled_variance(scenario.gamma);
    Ok(inject(series, scenario.window, |t| {
        let mut rng = rng::substream(scenario.seed, t as u64);
        let eta = mask.sample(&mut rng);
        (residual.column(t - s) + eta) * scenario.kappa
    }))
}

/// Singular values (descending) and matching left singular vectors.
pub(crate) fn sorted_left_svd(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("left vectors requested");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let values = idx.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(a.nrows(), idx.len(), |r, c| u[(r, idx[c])]);
    (values, u)
}

/// Rank at the largest ratio `s_k / s_{k+1}` between consecutive singular
/// values.
/// Values within round-off of zero (relative to the largest, scaled by
/// `dim`) count as equal, so their mutual ratios are 1.
pub fn gap_rank(singular_values: &[f64], dim: usize) -> usize {
    let top = match singular_values.first() {
        Some(&s) if s > 0.0 => s,
        _ => return 0,
    };
    let floor = top * f64::EPSILON * dim.max(1) as f64;
    let mut best = (1, f64::NEG_INFINITY);
    for k in 0..singular_values.len().saturating_sub(1) {
        let ratio = singular_values[k].max(floor) / singular_values[k + 1].max(floor);
        if ratio > best.1 {
            best = (k + 1, ratio);
        }
    }
    best.0
}

/// Basis of the estimated measurement subspace from historical data.
pub fn estimate_subspace(history: &DMatrix<f64>, rank: usize, center: bool) -> DMatrix<f64> {
    let data = if center {
        let mean = history.column_mean();
        let mut d = history.clone();
        for mut col in d.column_iter_mut() {
            col -= &mean;
        }
        d
    } else {
        history.clone()
    };
    let (_, u) = sorted_left_svd(&data);
    u.columns(0, rank).into_owned()
}

fn subspace_attack(
    series: &MeasurementSeries,
    basis: &DMatrix<f64>,
    scenario: &AttackScenario,
) -> MeasurementSeries {
    let mut rng = rng::substream(scenario.seed, 0x9CA);
    let g = DVector::from_fn(basis.ncols(), |_, _| rng.sample(StandardNormal));
    let a = basis * g * scenario.kappa;
    inject(series, scenario.window, |_| a.clone())
}

/// Injects `κ Û g` where `Û` spans the top `n_s` principal directions of the
/// centered history and `g ~ N(0, I)` is drawn once per window.
pub fn pca_blind_attack(
    series: &MeasurementSeries,
    history: &DMatrix<f64>,
    n_s: usize,
    scenario: &AttackScenario,
) -> Result<MeasurementSeries> {
    scenario.expect_family(AttackFamily::PcaBlind)?;
    scenario.validate(series.len())?;
    check_history(series, history, n_s)?;
    Ok(subspace_attack(series, &estimate_subspace(history, n_s, true), scenario))
}

/// Like the PCA attack but uncentered, with the rank picked at the largest
/// singular-value gap. Returns the attacked series and the detected rank.
pub fn lowrank_svd_attack(
    series: &MeasurementSeries,
    history: &DMatrix<f64>,
    n_s: usize,
    scenario: &AttackScenario,
) -> Result<(MeasurementSeries, usize)> {
    scenario.expect_family(AttackFamily::LowrankBlind)?;
    scenario.validate(series.len())?;
    check_history(series, history, n_s)?;
    let (values, _) = sorted_left_svd(history);
    let rank = gap_rank(&values, history.nrows().max(history.ncols()));
    Ok((subspace_attack(series, &estimate_subspace(history, rank, false), scenario), rank))
}

fn check_history(series: &MeasurementSeries, history: &DMatrix<f64>, n_s: usize) -> Result<()> {
    if history.nrows() != series.m() {
        return Err(Error::Dimension(format!(
            "history has {} channels, series has {}",
            history.nrows(),
            series.m()
        )));
    }
    if history.ncols() < n_s {
        return Err(Error::InsufficientSamples(format!(
            "{} history samples for a {n_s}-dimensional subspace",
            history.ncols()
        )));
    }
    Ok(())
}
