//! Finite-sample generalization error of null-vector estimates, and its
//! Monte-Carlo validation.
//!
//! `n` in the denominators is the number of columns of the full bus
//! Jacobian, i.e. `n_states + 1`, so that `T_o - n` is the inverse-Wishart
//! normalizer `T_o - rank - 1`.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::sorted_left_svd;
use crate::case::GridCase;
use crate::csd::fit_cycle_null;
use crate::error::{Error, Result};
use crate::graph::{build_graph, minimum_cycle_basis, random_fundamental_basis, CycleBasis};
use crate::rng::{child_seed, substream};
use crate::sim::{build_h, JacobianH};

/// `σ²(1 + rank/(T_o - n))`.
pub fn egen_closed_form(sigma: f64, rank_h: usize, t_o: usize, n: usize) -> Result<f64> {
    if t_o <= n {
        return Err(Error::InsufficientSamples(format!("T_o = {t_o} must exceed n = {n}")));
    }
    Ok(sigma * sigma * (1.0 + rank_h as f64 / (t_o - n) as f64))
}

/// Per-cycle form, `σ²(1 + (|c| - 1)/(T_o - |c|))`.
pub fn egen_cycle(sigma: f64, cycle_len: usize, t_o: usize) -> Result<f64> {
    egen_closed_form(sigma, cycle_len - 1, t_o, cycle_len)
}

/// Sum of the per-cycle closed form over a basis.
pub fn cycle_basis_egen(basis: &CycleBasis, t_o: usize, sigma: f64) -> Result<f64> {
    if t_o <= basis.max_length() {
        return Err(Error::InsufficientSamples(format!(
            "T_o = {t_o} must exceed the longest cycle ({})",
            basis.max_length()
        )));
    }
    basis.cycles.iter().map(|c| egen_cycle(sigma, c.len(), t_o)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub trials: usize,
    pub t_star: usize,
    pub sigmas: Vec<f64>,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            trials: 100,
            t_star: 1000,
            sigmas: vec![0.01, 0.02, 0.05, 0.1, 0.5, 1.0, 3.0],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenErrorEstimate {
    pub sigma: f64,
    pub t_o: usize,
    pub rank_h: usize,
    pub e_gen_closed: f64,
    pub e_gen_empirical: f64,
    /// Standard error of the empirical mean over trials.
    pub std_err: f64,
    pub rel_dev: f64,
    pub trials: usize,
    pub seed: u64,
}

fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `H X + σ E` with iid standard normal `X` and `E`.
fn draw(h: &DMatrix<f64>, t: usize, sigma: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let x = standard_normal_matrix(h.ncols(), t, rng);
    h * x + standard_normal_matrix(h.nrows(), t, rng) * sigma
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Empirical `E‖Z⋆ᵀ n̂‖²/T⋆` where `n̂` is the left singular direction of the
/// training data with the smallest singular value.
pub fn egen_monte_carlo(h: &JacobianH, cfg: &MonteCarloConfig, t_o: usize) -> Result<Vec<GenErrorEstimate>> {
    if h.m() <= h.n_states() {
        return Err(Error::NullityZero(format!(
            "H is {}×{}; the measurement space has no null direction",
            h.m(),
            h.n_states()
        )));
    }
    if cfg.trials == 0 || cfg.t_star == 0 {
        return Err(Error::InvalidParameter("trials and t_star must be positive".into()));
    }
    let (rank, n) = (h.n_states(), h.n_states() + 1);
    if t_o < h.m() {
        return Err(Error::InsufficientSamples(format!(
            "T_o = {t_o} is below the {} measurement channels",
            h.m()
        )));
    }
    cfg.sigmas
        .iter()
        .enumerate()
        .map(|(si, &sigma)| {
            let closed = egen_closed_form(sigma, rank, t_o, n)?;
            let cell_seed = child_seed(cfg.seed, si as u64);
            let per_trial: Vec<f64> = (0..cfg.trials)
                .into_par_iter()
                .map(|k| {
                    let mut rng = substream(child_seed(cell_seed, k as u64), 0);
                    let train = draw(&h.matrix, t_o, sigma, &mut rng);
                    let (_, u) = sorted_left_svd(&train);
                    let n_hat = u.column(h.m() - 1).into_owned();
                    let test = draw(&h.matrix, cfg.t_star, sigma, &mut rng);
                    (test.transpose() * n_hat).norm_squared() / cfg.t_star as f64
                })
                .collect();
            let (mean, se) = mean_and_se(&per_trial);
            Ok(GenErrorEstimate {
                sigma,
                t_o,
                rank_h: rank,
                e_gen_closed: closed,
                e_gen_empirical: mean,
                std_err: se,
                rel_dev: (mean - closed).abs() / closed,
                trials: cfg.trials,
                seed: cfg.seed,
            })
        })
        .collect()
}

pub fn gen_error_csv(rows: &[GenErrorEstimate]) -> String {
    let mut out = String::from("sigma,t_o,rank,closed,empirical,rel_dev,trials,seed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.sigma, r.t_o, r.rank_h, r.e_gen_closed, r.e_gen_empirical, r.rel_dev, r.trials, r.seed
        );
    }
    out
}

/// Unit vector spanning (part of) the null space of `Hᵀ`: the eigenvector of
/// `H Hᵀ` with the smallest eigenvalue.
pub fn null_direction(h: &JacobianH) -> Result<DVector<f64>> {
    if h.nullity() == 0 {
        return Err(Error::NullityZero("H has no left null space".into()));
    }
    let eig = (&h.matrix * h.matrix.transpose()).symmetric_eigen();
    let i = eig.eigenvalues.imin();
    Ok(eig.eigenvectors.column(i).into_owned())
}

/// First-order null-vector error `-(Z̄ᵀ)⁺ Eᵀ n` for `Z̄ = H X`.
pub fn first_order_err(
    h: &JacobianH,
    states: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    n_true: &DVector<f64>,
) -> Result<DVector<f64>> {
    if states.nrows() != h.n_states()
        || noise.nrows() != h.m()
        || noise.ncols() != states.ncols()
        || n_true.len() != h.m()
    {
        return Err(Error::Dimension(format!(
            "H {}×{}, states {}×{}, noise {}×{}, n {}",
            h.m(),
            h.n_states(),
            states.nrows(),
            states.ncols(),
            noise.nrows(),
            noise.ncols(),
            n_true.len()
        )));
    }
    let zbar_t = (&h.matrix * states).transpose();
    let eps = 1e-12 * zbar_t.amax().max(f64::MIN_POSITIVE);
    let pinv = zbar_t
        .pseudo_inverse(eps)
        .map_err(|e| Error::Singular(e.to_string()))?;
    Ok(-(pinv * (noise.transpose() * n_true)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceCheck {
    pub empirical: DMatrix<f64>,
    pub closed: DMatrix<f64>,
    pub frobenius_rel_err: f64,
    /// Componentwise sample mean of the error vectors.
    pub mean: DVector<f64>,
    /// Componentwise sample standard deviation.
    pub std: DVector<f64>,
}

/// Sample covariance of [`first_order_err`] over trials against
/// `σ²/(T_o - n) (H Hᵀ)⁺`.
pub fn err_covariance_check(
    h: &JacobianH,
    t_o: usize,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<CovarianceCheck> {
    let n = h.n_states() + 1;
    if t_o <= n {
        return Err(Error::InsufficientSamples(format!("T_o = {t_o} must exceed n = {n}")));
    }
    if trials < 2 {
        return Err(Error::InvalidParameter("need at least two trials".into()));
    }
    let n_true = null_direction(h)?;
    let errs: Vec<DVector<f64>> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(child_seed(seed, k as u64), 0);
            let x = standard_normal_matrix(h.n_states(), t_o, &mut rng);
            let e = standard_normal_matrix(h.m(), t_o, &mut rng) * sigma;
            first_order_err(h, &x, &e, &n_true)
        })
        .collect::<Result<_>>()?;
    let m = h.m();
    let mut mean = DVector::zeros(m);
    for e in &errs {
        mean += e;
    }
    mean /= trials as f64;
    let mut cov = DMatrix::zeros(m, m);
    for e in &errs {
        let d = e - &mean;
        cov += &d * d.transpose();
    }
    cov /= (trials - 1) as f64;
    let std = cov.diagonal().map(f64::sqrt);
    let hht = &h.matrix * h.matrix.transpose();
    let eps = 1e-10 * hht.amax();
    let closed = hht
        .pseudo_inverse(eps)
        .map_err(|e| Error::Singular(e.to_string()))?
        * (sigma * sigma / (t_o - n) as f64);
    let frobenius_rel_err = (&cov - &closed).norm() / closed.norm();
    Ok(CovarianceCheck {
        empirical: cov,
        closed,
        frobenius_rel_err,
        mean,
        std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisComparisonRow {
    pub label: String,
    pub total_length: usize,
    pub lengths: Vec<usize>,
    pub closed: f64,
    pub empirical_mean: f64,
    pub empirical_se: f64,
}

/// Closed-form and empirical per-cycle generalization error of the minimum
/// cycle basis and of `k_random` fundamental bases of random spanning trees.
///
/// Every trial draws one training and one test set shared by all bases, so
/// the comparison uses common random numbers. The first row is the MCB.
pub fn mcb_optimality_experiment(
    case: &GridCase,
    t_o: usize,
    sigma: f64,
    trials: usize,
    k_random: usize,
    t_star: usize,
    seed: u64,
) -> Result<Vec<BasisComparisonRow>> {
    let g = build_graph(case);
    if g.cyclomatic_number() == 0 {
        return Err(Error::NullityZero("the grid has no cycles".into()));
    }
    let h = build_h(case);
    let mut bases = vec![("mcb".to_string(), minimum_cycle_basis(&g, None)?)];
    let mut rng = substream(seed, 0xF00D);
    for i in 0..k_random {
        bases.push((format!("fundamental_{i}"), random_fundamental_basis(&g, &mut rng)));
    }
    for (_, b) in &bases {
        if t_o <= b.max_length() {
            return Err(Error::InsufficientSamples(format!(
                "T_o = {t_o} must exceed the longest cycle ({})",
                b.max_length()
            )));
        }
    }

    // distinct cycles across all bases, keyed by their edge set
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut cycles = Vec::new();
    let membership: Vec<Vec<usize>> = bases
        .iter()
        .map(|(_, b)| {
            b.cycles
                .iter()
                .map(|c| {
                    *index.entry(c.sorted_edges()).or_insert_with(|| {
                        cycles.push(c.clone());
                        cycles.len() - 1
                    })
                })
                .collect()
        })
        .collect();

    let per_trial: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(child_seed(seed, k as u64), 1);
            let train = draw(&h.matrix, t_o, sigma, &mut rng);
            let test = draw(&h.matrix, t_star, sigma, &mut rng);
            let per_cycle: Vec<f64> = cycles
                .iter()
                .map(|c| {
                    let n_hat = DVector::from_vec(fit_cycle_null(&train, c)?);
                    let zc = test.select_rows(c.edge_ids());
                    Ok((zc.transpose() * n_hat).norm_squared() / t_star as f64)
                })
                .collect::<Result<_>>()?;
            Ok(membership
                .iter()
                .map(|ids| ids.iter().map(|&i| per_cycle[i]).sum())
                .collect())
        })
        .collect::<Result<_>>()?;

    bases
        .iter()
        .enumerate()
        .map(|(b, (label, basis))| {
            let values: Vec<f64> = per_trial.iter().map(|t| t[b]).collect();
            let (mean, se) = mean_and_se(&values);
            Ok(BasisComparisonRow {
                label: label.clone(),
                total_length: basis.total_length(),
                lengths: basis.lengths(),
                closed: cycle_basis_egen(basis, t_o, sigma)?,
                empirical_mean: mean,
                empirical_se: se,
            })
        })
        .collect()
}

pub fn basis_comparison_csv(rows: &[BasisComparisonRow]) -> String {
    let mut out = String::from("basis,total_length,closed,empirical_mean,empirical_se\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.label, r.total_length, r.closed, r.empirical_mean, r.empirical_se
        );
    }
    out
}
