//! DC measurement model and time-series generation.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::case::{GridCase, LoadProfile};
use crate::error::{Error, Result};
use crate::rng;

/// Branch-flow Jacobian with the slack angle removed. Row `e` is
/// `(e_from - e_to) / x_e` restricted to the non-slack buses.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianH {
    pub matrix: DMatrix<f64>,
    /// Bus position of each state column.
    pub state_buses: Vec<usize>,
}

impl JacobianH {
    pub fn m(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.matrix.ncols()
    }

    /// `m - n_s`, the dimension of the null space of `Hᵀ` for a connected
    /// grid.
    pub fn nullity(&self) -> usize {
        self.m() - self.n_states()
    }

    /// Orthogonal projector onto the complement of `Col(H)`, `I - H H⁺`.
    pub fn complement_projector(&self) -> Result<DMatrix<f64>> {
        let h = &self.matrix;
        let gram = h.transpose() * h;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Singular("HᵀH is not positive definite".into()))?;
        let hp = chol.solve(&h.transpose());
        Ok(DMatrix::identity(self.m(), self.m()) - h * hp)
    }

    /// `Hᵀ diag(x) H`, the reduced bus susceptance matrix.
    fn reduced_laplacian(&self, reactance: &[f64]) -> DMatrix<f64> {
        let mut weighted = self.matrix.clone();
        for (e, mut row) in weighted.row_iter_mut().enumerate() {
            row *= reactance[e];
        }
        self.matrix.transpose() * weighted
    }
}

pub fn build_h(case: &GridCase) -> JacobianH {
    let slack = case.slack_index();
    let state_buses: Vec<usize> = (0..case.n_buses()).filter(|&i| i != slack).collect();
    let mut column = vec![usize::MAX; case.n_buses()];
    for (j, &bus) in state_buses.iter().enumerate() {
        column[bus] = j;
    }
    let mut h = DMatrix::zeros(case.n_branches(), state_buses.len());
    for (e, (&(a, b), br)) in case.branch_endpoints().iter().zip(&case.branches).enumerate() {
        let y = 1.0 / br.reactance;
        if a != slack {
            h[(e, column[a])] += y;
        }
        if b != slack {
            h[(e, column[b])] -= y;
        }
    }
    JacobianH {
        matrix: h,
        state_buses,
    }
}

/// Independent Gaussian sensor noise, `R = diag(σᵢ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: Vec<f64>,
}

impl NoiseModel {
    /// Per-channel standard deviations. Zero is accepted so that noise-free
    /// series can be generated; estimators reject it.
    pub fn new(sigma: Vec<f64>) -> Result<Self> {
        if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidParameter(
                "noise standard deviations must be finite and nonnegative".into(),
            ));
        }
        Ok(NoiseModel { sigma })
    }

    pub fn homoscedastic(m: usize, sigma: f64) -> Result<Self> {
        NoiseModel::new(vec![sigma; m])
    }

    pub fn m(&self) -> usize {
        self.sigma.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| s * s).collect()
    }

    pub fn is_positive(&self) -> bool {
        self.sigma.iter().all(|&s| s > 0.0)
    }

    /// The same model with every variance multiplied by `factor`.
    pub fn scaled_variance(&self, factor: f64) -> NoiseModel {
        NoiseModel {
            sigma: self.sigma.iter().map(|s| s * factor.sqrt()).collect(),
        }
    }

    /// One draw of `N(0, R)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.m(),
            self.sigma.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Attacked,
}

/// Branch-flow measurements, one column per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSeries {
    pub z: DMatrix<f64>,
    pub x_true: Option<DMatrix<f64>>,
    pub clean: Option<DMatrix<f64>>,
    pub labels: Vec<Label>,
    pub seed: u64,
    pub sigma: Vec<f64>,
    pub case_name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    seed: u64,
    sigma: Vec<f64>,
    labels: Vec<Label>,
    case_name: String,
}

impl MeasurementSeries {
    /// Wraps observed measurements with no ground truth.
    pub fn from_observed(z: DMatrix<f64>) -> Self {
        let t = z.ncols();
        MeasurementSeries {
            z,
            x_true: None,
            clean: None,
            labels: vec![Label::Normal; t],
            seed: 0,
            sigma: Vec::new(),
            case_name: String::new(),
        }
    }

    pub fn m(&self) -> usize {
        self.z.nrows()
    }

    pub fn len(&self) -> usize {
        self.z.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.z.ncols() == 0
    }

    pub fn attacked(&self) -> Vec<bool> {
        self.labels.iter().map(|l| *l == Label::Attacked).collect()
    }

    /// Timesteps `start..end` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> MeasurementSeries {
        let cols = end - start;
        MeasurementSeries {
            z: self.z.columns(start, cols).into_owned(),
            x_true: self.x_true.as_ref().map(|x| x.columns(start, cols).into_owned()),
            clean: self.clean.as_ref().map(|c| c.columns(start, cols).into_owned()),
            labels: self.labels[start..end].to_vec(),
            seed: self.seed,
            sigma: self.sigma.clone(),
            case_name: self.case_name.clone(),
        }
    }

    /// Rows are timesteps, columns `z0..z{m-1}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push('t');
        for e in 0..self.m() {
            out.push_str(&format!(",z{e}"));
        }
        out.push('\n');
        for t in 0..self.len() {
            out.push_str(&t.to_string());
            for e in 0..self.m() {
                out.push_str(&format!(",{}", self.z[(e, t)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn sidecar_json(&self) -> String {
        serde_json::to_string_pretty(&Sidecar {
            seed: self.seed,
            sigma: self.sigma.clone(),
            labels: self.labels.clone(),
            case_name: self.case_name.clone(),
        })
        .expect("sidecar serializes")
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::File::create(dir.join(format!("{stem}.csv")))?.write_all(self.to_csv().as_bytes())?;
        std::fs::write(dir.join(format!("{stem}.json")), self.sidecar_json())?;
        Ok(())
    }

    /// Reads a measurement CSV; a sidecar, when given, restores labels and
    /// metadata.
    pub fn from_csv(csv_text: &str, sidecar: Option<&str>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(csv_text.as_bytes());
        let headers = reader.headers()?.clone();
        let m = headers.len().saturating_sub(1);
        if m == 0 || &headers[0] != "t" {
            return Err(Error::Schema("measurement CSV needs a `t` column followed by flows".into()));
        }
        let mut values = Vec::new();
        let mut t = 0;
        for record in reader.records() {
            let record = record?;
            for field in record.iter().skip(1) {
                values.push(field.trim().parse::<f64>().map_err(|_| {
                    Error::Schema(format!("row {t}: `{field}` is not a number"))
                })?);
            }
            t += 1;
        }
        let z = DMatrix::from_column_slice(m, t, &values);
        let mut series = MeasurementSeries::from_observed(z);
        if let Some(text) = sidecar {
            let meta: Sidecar =
                serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
            if meta.labels.len() != t {
                return Err(Error::Dimension(format!(
                    "sidecar has {} labels for {t} timesteps",
                    meta.labels.len()
                )));
            }
            series.labels = meta.labels;
            series.seed = meta.seed;
            series.sigma = meta.sigma;
            series.case_name = meta.case_name;
        }
        Ok(series)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let csv_text = std::fs::read_to_string(dir.join(format!("{stem}.csv")))?;
        let sidecar = std::fs::read_to_string(dir.join(format!("{stem}.json"))).ok();
        MeasurementSeries::from_csv(&csv_text, sidecar.as_deref())
    }
}

/// Bus angles for `t_len` timesteps of scaled loads. Each non-slack bus
/// withdraws `base_load · profile(t) · U(1 - jitter, 1 + jitter)`; the slack
/// bus balances the system.
pub fn simulate_states(
    case: &GridCase,
    profile: &LoadProfile,
    t_len: usize,
    jitter: f64,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if t_len == 0 {
        return Err(Error::InvalidParameter("need at least one timestep".into()));
    }
    if !(0.0..1.0).contains(&jitter) {
        return Err(Error::InvalidParameter(format!("jitter {jitter} outside [0, 1)")));
    }
    let h = build_h(case);
    let b = h.reduced_laplacian(&case.reactances());
    let chol = b
        .cholesky()
        .ok_or_else(|| Error::Singular("reduced susceptance matrix is singular".into()))?;
    let loads: Vec<f64> = h.state_buses.iter().map(|&i| case.buses[i].base_load).collect();
    let mut injections = DMatrix::zeros(h.n_states(), t_len);
    for t in 0..t_len {
        let mut rng = rng::substream(seed, t as u64);
        let scale = profile.factor(t);
        for (j, &load) in loads.iter().enumerate() {
            let noise = if jitter > 0.0 {
                rng.random_range(1.0 - jitter..1.0 + jitter)
            } else {
                1.0
            };
            injections[(j, t)] = -load * scale * noise;
        }
    }
    Ok(chol.solve(&injections))
}

/// `z = H x + ε` with ε drawn per timestep from its own substream of `seed`.
pub fn generate_measurements(
    h: &JacobianH,
    states: &DMatrix<f64>,
    noise: &NoiseModel,
    seed: u64,
) -> Result<MeasurementSeries> {
    if states.nrows() != h.n_states() {
        return Err(Error::Dimension(format!(
            "states have {} rows, H has {} columns",
            states.nrows(),
            h.n_states()
        )));
    }
    if noise.m() != h.m() {
        return Err(Error::Dimension(format!(
            "noise model has {} channels, H has {} rows",
            noise.m(),
            h.m()
        )));
    }
    let clean = &h.matrix * states;
    let mut z = clean.clone();
    for t in 0..z.ncols() {
        let mut rng = rng::substream(seed, t as u64);
        let eps = noise.sample(&mut rng);
        let mut col = z.column_mut(t);
        col += eps;
    }
    Ok(MeasurementSeries {
        labels: vec![Label::Normal; z.ncols()],
        z,
        x_true: Some(states.clone()),
        clean: Some(clean),
        seed,
        sigma: noise.sigma.clone(),
        case_name: String::new(),
    })
}

/// `n_s × t_len` matrix of iid standard normal entries.
pub fn isotropic_states(n_s: usize, t_len: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng::substream(seed, 0x150);
    DMatrix::from_fn(n_s, t_len, |_, _| rng.sample(StandardNormal))
}
