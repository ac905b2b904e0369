//! Cycle-space detector: one null vector per basis cycle fitted from
//! attack-free data, projection scores, minimum cross-entropy thresholds and
//! the root-sum-square aggregate.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::sorted_left_svd;
use crate::error::{Error, Result};
use crate::graph::{minimum_cycle_basis, BasisKind, Cycle, CycleBasis, OrientedGraph};

/// Default class-separation factor for [`mce_threshold`].
pub const DEFAULT_SEPARATION: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleDetector {
    pub cycle: Cycle,
    /// Cycle members in traversal order; `n_hat[k]` belongs to `branch_ids[k]`.
    pub branch_ids: Vec<usize>,
    pub n_hat: Vec<f64>,
    pub threshold: Option<f64>,
}

impl CycleDetector {
    /// The null vector embedded in `R^m`, zero off the cycle.
    pub fn embedded(&self, m: usize) -> DVector<f64> {
        let mut v = DVector::zeros(m);
        for (&e, &w) in self.branch_ids.iter().zip(&self.n_hat) {
            v[e] = w;
        }
        v
    }

    /// `|n̂ᵀ z_c|` for every column of `z`.
    pub fn score(&self, z: &DMatrix<f64>) -> Vec<f64> {
        z.column_iter()
            .map(|col| {
                self.branch_ids
                    .iter()
                    .zip(&self.n_hat)
                    .map(|(&e, &w)| w * col[e])
                    .sum::<f64>()
                    .abs()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorBank {
    pub detectors: Vec<CycleDetector>,
    pub kind: BasisKind,
    pub t_o: usize,
}

/// Unit eigenvector of `Z_c Z_cᵀ` for its smallest eigenvalue, where `Z_c`
/// holds the training rows of the cycle's branches. The largest-magnitude
/// entry is made positive.
pub fn fit_cycle_null(train: &DMatrix<f64>, cycle: &Cycle) -> Result<Vec<f64>> {
    let len = cycle.len();
    if train.ncols() < len {
        return Err(Error::InsufficientSamples(format!(
            "{} training samples for a cycle of {len} branches",
            train.ncols()
        )));
    }
    if let Some(&e) = cycle.edge_ids().iter().find(|&&e| e >= train.nrows()) {
        return Err(Error::Dimension(format!(
            "cycle uses branch {e}, training data has {} rows",
            train.nrows()
        )));
    }
    let zc = train.select_rows(cycle.edge_ids());
    let gram = &zc * zc.transpose();
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lo, next) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if next - lo <= 1e-12 * eig.eigenvalues.amax().max(1e-300) {
        log::warn!(
            "degenerate null-vector fit on cycle {:?}: smallest eigenvalues {lo:e}, {next:e}",
            cycle.edge_ids()
        );
    }
    let mut n: Vec<f64> = eig.eigenvectors.column(order[0]).iter().copied().collect();
    let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
    let pivot = n
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if v.abs() > n[best].abs() { i } else { best });
    let sign = if n[pivot] < 0.0 { -1.0 } else { 1.0 };
    for v in &mut n {
        *v *= sign / norm;
    }
    Ok(n)
}

/// Fits one detector per basis cycle (in parallel; results keep basis order).
pub fn fit_bank(train: &DMatrix<f64>, basis: &CycleBasis) -> Result<DetectorBank> {
    let detectors = basis
        .cycles
        .par_iter()
        .map(|c| {
            Ok(CycleDetector {
                cycle: c.clone(),
                branch_ids: c.edge_ids().to_vec(),
                n_hat: fit_cycle_null(train, c)?,
                threshold: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectorBank {
        detectors,
        kind: basis.kind,
        t_o: train.ncols(),
    })
}

/// Per-cycle scores, `|basis| × T`.
pub fn score(bank: &DetectorBank, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(d) = bank
        .detectors
        .iter()
        .find(|d| d.branch_ids.iter().any(|&e| e >= z.nrows()))
    {
        return Err(Error::Dimension(format!(
            "detector on branches {:?} applied to {} channels",
            d.branch_ids,
            z.nrows()
        )));
    }
    let rows: Vec<Vec<f64>> = bank.detectors.par_iter().map(|d| d.score(z)).collect();
    Ok(DMatrix::from_fn(rows.len(), z.ncols(), |i, t| rows[i][t]))
}

/// Root-sum-square over cycles, per timestep.
pub fn aggregate(scores: &DMatrix<f64>) -> Vec<f64> {
    scores
        .column_iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MceThreshold {
    pub threshold: f64,
    pub mean_below: f64,
    pub mean_above: f64,
    pub pooled_std: f64,
    pub iterations: usize,
    /// False when the two classes are not distinct enough to call one of them
    /// an attack class.
    pub separable: bool,
    /// Only one class exists (e.g. all values equal); nothing is flagged.
    pub degenerate: bool,
}

/// Li's iterative minimum cross-entropy threshold. Values are floored at
/// `1e-12`. The split is declared separable when the class means differ by at
/// least `separation` pooled standard deviations.
pub fn mce_threshold(values: &[f64], separation: f64) -> MceThreshold {
    // sorted, so sums (and hence the result) do not depend on input order
    let mut v: Vec<f64> = values.iter().map(|x| x.max(1e-12)).collect();
    v.sort_by(f64::total_cmp);
    let degenerate = |t: f64| MceThreshold {
        threshold: t,
        mean_below: t,
        mean_above: t,
        pooled_std: 0.0,
        iterations: 0,
        separable: false,
        degenerate: true,
    };
    if v.is_empty() {
        return degenerate(f64::INFINITY);
    }
    let mut prefix = Vec::with_capacity(v.len() + 1);
    prefix.push(0.0);
    for &x in &v {
        prefix.push(prefix.last().unwrap() + x);
    }
    let total = prefix[v.len()];
    let mean = total / v.len() as f64;
    let split = |tau: f64| {
        let nb = v.partition_point(|&x| x <= tau);
        let na = v.len() - nb;
        let (sb, sa) = (prefix[nb], total - prefix[nb]);
        (nb, na, sb / nb.max(1) as f64, sa / na.max(1) as f64)
    };

    let mut tau = mean;
    let mut iterations = 0;
    loop {
        let (nb, na, mb, ma) = split(tau);
        if nb == 0 || na == 0 {
            return degenerate(tau);
        }
        let next = (mb - ma) / (mb.ln() - ma.ln());
        iterations += 1;
        let done = (next - tau).abs() < 1e-9 * tau.abs().max(f64::MIN_POSITIVE) || iterations >= 500;
        tau = next;
        if done {
            break;
        }
    }
    let (nb, na, mb, ma) = split(tau);
    if nb == 0 || na == 0 {
        return degenerate(tau);
    }
    let ss: f64 = v
        .iter()
        .map(|&x| if x <= tau { (x - mb).powi(2) } else { (x - ma).powi(2) })
        .sum();
    let pooled_std = (ss / v.len() as f64).sqrt();
    MceThreshold {
        threshold: tau,
        mean_below: mb,
        mean_above: ma,
        pooled_std,
        iterations,
        separable: ma - mb >= separation * pooled_std,
        degenerate: false,
    }
}

/// Confusion counts and derived scores over per-timestep labels. Precision
/// (recall) is 0 when nothing is flagged (nothing is attacked).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_flags(flags: &[bool], labels: &[bool]) -> Metrics {
        let mut m = Metrics::default();
        for (&f, &l) in flags.iter().zip(labels) {
            match (f, l) {
                (true, true) => m.tp += 1,
                (true, false) => m.fp += 1,
                (false, true) => m.fn_ += 1,
                (false, false) => m.tn += 1,
            }
        }
        let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        m.precision = ratio(m.tp, m.fp);
        m.recall = ratio(m.tp, m.fn_);
        m.f1 = if m.precision + m.recall > 0.0 {
            2.0 * m.precision * m.recall / (m.precision + m.recall)
        } else {
            0.0
        };
        m
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    /// Fraction of timesteps flagged.
    pub fn flag_rate(&self) -> f64 {
        let n = self.tp + self.fp + self.fn_ + self.tn;
        if n == 0 {
            0.0
        } else {
            (self.tp + self.fp) as f64 / n as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectMode {
    /// An alarm when any single cycle detector fires.
    Local,
    Aggregated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOptions {
    pub mode: DetectMode,
    /// Factor for the `separable` annotation on each threshold.
    pub separation: f64,
    /// Suppress all flags on traces whose classes are not separable.
    pub gate_on_separability: bool,
    /// When set, thresholds come from this attack-free trace instead of the
    /// evaluation trace itself.
    pub calibration: Option<DMatrix<f64>>,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            mode: DetectMode::Aggregated,
            separation: DEFAULT_SEPARATION,
            gate_on_separability: false,
            calibration: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub scores: Vec<f64>,
    pub threshold: MceThreshold,
    pub flags: Vec<bool>,
    pub metrics: Metrics,
}

impl Trace {
    fn new(scores: Vec<f64>, threshold: MceThreshold, labels: &[bool], gate: bool) -> Trace {
        let active = !threshold.degenerate && (threshold.separable || !gate);
        let flags: Vec<bool> = scores
            .iter()
            .map(|&s| active && s >= threshold.threshold)
            .collect();
        let metrics = Metrics::from_flags(&flags, labels);
        Trace {
            scores,
            threshold,
            flags,
            metrics,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleTrace {
    pub cycle_id: usize,
    pub branch_ids: Vec<usize>,
    pub trace: Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub mode: DetectMode,
    pub per_cycle: Vec<CycleTrace>,
    pub aggregate: Trace,
    /// OR over the cycle detectors.
    pub any_local: Vec<bool>,
    pub local_metrics: Metrics,
    pub labels: Vec<bool>,
}

impl DetectionReport {
    /// Metrics of the decision selected by `mode`.
    pub fn metrics(&self) -> Metrics {
        match self.mode {
            DetectMode::Local => self.local_metrics,
            DetectMode::Aggregated => self.aggregate.metrics,
        }
    }

    pub fn flags(&self) -> &[bool] {
        match self.mode {
            DetectMode::Local => &self.any_local,
            DetectMode::Aggregated => &self.aggregate.flags,
        }
    }

    /// Scores as CSV: `t,label,cycle_0,...,aggregate`.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("t,label");
        for c in &self.per_cycle {
            let _ = write!(out, ",cycle_{}", c.cycle_id);
        }
        out.push_str(",aggregate\n");
        for t in 0..self.aggregate.scores.len() {
            let _ = write!(out, "{t},{}", u8::from(self.labels[t]));
            for c in &self.per_cycle {
                let _ = write!(out, ",{}", c.trace.scores[t]);
            }
            let _ = writeln!(out, ",{}", self.aggregate.scores[t]);
        }
        out
    }

    /// Summary JSON pointing at the score CSV written alongside.
    pub fn summary_json(&self, scores_file: &str) -> String {
        let per_cycle: Vec<serde_json::Value> = self
            .per_cycle
            .iter()
            .map(|c| {
                serde_json::json!({
                    "cycle_id": c.cycle_id,
                    "branch_ids": c.branch_ids,
                    "threshold": c.trace.threshold.threshold,
                    "separable": c.trace.threshold.separable,
                    "metrics": c.trace.metrics,
                    "scores_file": scores_file,
                })
            })
            .collect();
        let m = self.metrics();
        serde_json::to_string_pretty(&serde_json::json!({
            "mode": self.mode,
            "per_cycle": per_cycle,
            "aggregate": {
                "threshold": self.aggregate.threshold.threshold,
                "separable": self.aggregate.threshold.separable,
                "metrics": self.aggregate.metrics,
                "scores_file": scores_file,
            },
            "local_metrics": self.local_metrics,
            "metrics": {"precision": m.precision, "recall": m.recall, "f1": m.f1},
        }))
        .expect("report serializes")
    }

    /// Writes `<stem>.json` and `<stem>_scores.csv`, each prefixed by
    /// `header` when given.
    pub fn write(&self, dir: &Path, stem: &str, header: Option<&str>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let scores_file = format!("{stem}_scores.csv");
        let prefix = header.map(|h| format!("{h}\n")).unwrap_or_default();
        std::fs::write(dir.join(&scores_file), format!("{prefix}{}", self.scores_csv()))?;
        std::fs::write(dir.join(format!("{stem}.json")), self.summary_json(&scores_file))?;
        Ok(())
    }
}

fn thresholds_for(
    scores: &DMatrix<f64>,
    agg: &[f64],
    calib: Option<(&DMatrix<f64>, Vec<f64>)>,
    separation: f64,
) -> (Vec<MceThreshold>, MceThreshold) {
    let (s, a) = match &calib {
        Some((cs, ca)) => (*cs, ca.as_slice()),
        None => (scores, agg),
    };
    let per: Vec<MceThreshold> = s
        .row_iter()
        .map(|r| mce_threshold(&r.iter().copied().collect::<Vec<_>>(), separation))
        .collect();
    (per, mce_threshold(a, separation))
}

/// Scores `test`, thresholds every trace and compares flags with the
/// series' attack labels (`labels[t]` true when attacked).
pub fn detect(
    bank: &DetectorBank,
    test: &DMatrix<f64>,
    labels: &[bool],
    opts: &DetectOptions,
) -> Result<DetectionReport> {
    if labels.len() != test.ncols() {
        return Err(Error::Dimension(format!(
            "{} labels for {} timesteps",
            labels.len(),
            test.ncols()
        )));
    }
    let scores = score(bank, test)?;
    let agg = aggregate(&scores);
    let calib = match &opts.calibration {
        Some(c) => {
            let cs = score(bank, c)?;
            let ca = aggregate(&cs);
            Some((cs, ca))
        }
        None => None,
    };
    let (per, agg_tau) = thresholds_for(
        &scores,
        &agg,
        calib.as_ref().map(|(s, a)| (s, a.clone())),
        opts.separation,
    );
    let per_cycle: Vec<CycleTrace> = per
        .into_iter()
        .enumerate()
        .map(|(i, tau)| CycleTrace {
            cycle_id: i,
            branch_ids: bank.detectors[i].branch_ids.clone(),
            trace: Trace::new(
                scores.row(i).iter().copied().collect(),
                tau,
                labels,
                opts.gate_on_separability,
            ),
        })
        .collect();
    let any_local: Vec<bool> = (0..test.ncols())
        .map(|t| per_cycle.iter().any(|c| c.trace.flags[t]))
        .collect();
    Ok(DetectionReport {
        mode: opts.mode,
        local_metrics: Metrics::from_flags(&any_local, labels),
        any_local,
        aggregate: Trace::new(agg, agg_tau, labels, opts.gate_on_separability),
        per_cycle,
        labels: labels.to_vec(),
    })
}

/// Unconstrained baseline: the `m - n_s` left singular vectors of the
/// training data with the smallest singular values, scored by `‖N̂ᵀ z‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdBaseline {
    pub null_basis: DMatrix<f64>,
}

impl SvdBaseline {
    pub fn fit(train: &DMatrix<f64>, n_s: usize) -> Result<Self> {
        let m = train.nrows();
        if train.ncols() < m {
            return Err(Error::InsufficientSamples(format!(
                "{} training samples for {m} channels",
                train.ncols()
            )));
        }
        if n_s >= m {
            return Err(Error::NullityZero(format!("{n_s} states for {m} channels")));
        }
        let (_, u) = sorted_left_svd(train);
        Ok(SvdBaseline {
            null_basis: u.columns(n_s, m - n_s).into_owned(),
        })
    }

    pub fn score(&self, z: &DMatrix<f64>) -> Vec<f64> {
        (self.null_basis.transpose() * z)
            .column_iter()
            .map(|c| c.norm())
            .collect()
    }
}

pub fn svd_baseline_detect(
    train: &DMatrix<f64>,
    test: &DMatrix<f64>,
    labels: &[bool],
    n_s: usize,
    opts: &DetectOptions,
) -> Result<(SvdBaseline, Trace)> {
    let model = SvdBaseline::fit(train, n_s)?;
    let scores = model.score(test);
    let tau = match &opts.calibration {
        Some(c) => mce_threshold(&model.score(c), opts.separation),
        None => mce_threshold(&scores, opts.separation),
    };
    Ok((model, Trace::new(scores, tau, labels, opts.gate_on_separability)))
}

// ---------------------------------------------------------------------------
// Partial observability
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportClass {
    /// No attacked branch lies on an observable cycle.
    InMissingCyclesOnly,
    /// Every attacked branch lies on an observable cycle.
    InRemainingCycles,
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedObservability {
    pub removed: Vec<usize>,
    pub kept: Vec<usize>,
    /// Minimum cycle basis of the remaining graph, in original branch ids.
    pub basis: CycleBasis,
    covered: BTreeSet<usize>,
}

impl MaskedObservability {
    pub fn classify(&self, support: &[usize]) -> SupportClass {
        let inside = support.iter().filter(|e| self.covered.contains(e)).count();
        if inside == 0 {
            SupportClass::InMissingCyclesOnly
        } else if inside == support.len() {
            SupportClass::InRemainingCycles
        } else {
            SupportClass::Mixed
        }
    }

    /// Branches lying on at least one observable cycle.
    pub fn covered_branches(&self) -> Vec<usize> {
        self.covered.iter().copied().collect()
    }
}

/// Drops the `removed` branches and recomputes the minimum cycle basis on
/// what is left (per component when the remainder falls apart).
pub fn mask_observability(graph: &OrientedGraph, removed: &[usize]) -> Result<MaskedObservability> {
    let removed_set: BTreeSet<usize> = removed.iter().copied().collect();
    if let Some(&e) = removed_set.iter().find(|&&e| e >= graph.n_edges()) {
        return Err(Error::InvalidParameter(format!("no branch {e} to remove")));
    }
    let kept: Vec<usize> = (0..graph.n_edges()).filter(|e| !removed_set.contains(e)).collect();
    if kept.is_empty() {
        return Err(Error::InvalidParameter("every branch was removed".into()));
    }
    let sub = graph.subgraph(&kept);
    let sub_basis = minimum_cycle_basis(&sub, None)?;
    let cycles: Vec<Cycle> = sub_basis
        .cycles
        .iter()
        .map(|c| {
            let relabeled: Vec<usize> = c.edge_ids().iter().map(|&e| kept[e]).collect();
            Cycle::canonical(graph, &relabeled)
        })
        .collect::<Result<_>>()?;
    let covered = cycles.iter().flat_map(|c| c.edge_ids().iter().copied()).collect();
    Ok(MaskedObservability {
        removed: removed_set.into_iter().collect(),
        kept,
        basis: CycleBasis {
            cycles,
            kind: BasisKind::Minimum,
        },
        covered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, fundamental_cycle_basis, topology_null_space};
    use crate::rng::substream;
    use crate::sim::{build_h, generate_measurements, isotropic_states, NoiseModel};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn triangle() -> crate::case::GridCase {
        crate::sim::tests::triangle_case([0.0, 0.3, 0.2])
    }

    fn series(case: &crate::case::GridCase, sigma: f64, t: usize, seed: u64) -> DMatrix<f64> {
        let h = build_h(case);
        let x = isotropic_states(h.n_states(), t, seed);
        generate_measurements(&h, &x, &NoiseModel::homoscedastic(h.m(), sigma).unwrap(), seed + 1)
            .unwrap()
            .z
    }

    #[test]
    fn noise_free_triangle_fit_matches_kvl_vector() {
        let case = triangle();
        let basis = minimum_cycle_basis(&build_graph(&case), None).unwrap();
        let z = series(&case, 0.0, 30, 1);
        let n = fit_cycle_null(&z, &basis.cycles[0]).unwrap();
        let s = 14f64.sqrt();
        assert_relative_eq!(n[0], 1.0 / s, epsilon = 1e-10);
        assert_relative_eq!(n[1], 2.0 / s, epsilon = 1e-10);
        assert_relative_eq!(n[2], 3.0 / s, epsilon = 1e-10);
        let col = topology_null_space(&case, &basis);
        assert_relative_eq!(col.column(0).into_owned(), DVector::from_vec(n), epsilon = 1e-10);
    }

    #[test]
    fn fit_needs_enough_samples() {
        let case = triangle();
        let basis = minimum_cycle_basis(&build_graph(&case), None).unwrap();
        let z = series(&case, 0.02, 2, 1);
        assert!(matches!(
            fit_cycle_null(&z, &basis.cycles[0]),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn noisy_fit_is_close() {
        let case = triangle();
        let basis = minimum_cycle_basis(&build_graph(&case), None).unwrap();
        let z = series(&case, 0.02, 6, 3);
        let n = DVector::from_vec(fit_cycle_null(&z, &basis.cycles[0]).unwrap());
        let truth = DVector::from_vec(vec![1.0, 2.0, 3.0]).normalize();
        let angle = n.dot(&truth).abs().min(1.0).acos().to_degrees();
        assert!(angle <= 5.0, "angle {angle}");
    }

    #[test]
    fn mce_reference_values() {
        let t = mce_threshold(&[1.0, 1.0, 1.0, 9.0, 9.0, 9.0], DEFAULT_SEPARATION);
        assert_relative_eq!(t.threshold, 8.0 / 9f64.ln(), epsilon = 1e-9);
        assert!(t.separable);
        let t = mce_threshold(&[5.0; 8], DEFAULT_SEPARATION);
        assert_eq!(t.threshold, 5.0);
        assert!(!t.separable && t.degenerate);
        let trace = Trace::new(vec![5.0; 8], t, &[false; 8], false);
        assert!(trace.flags.iter().all(|&f| !f));

        let mut rng = substream(8, 0);
        let mut v: Vec<f64> = (0..500).map(|_| 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        v.extend((0..500).map(|_| 10.0 + 0.1 * rng.sample::<f64, _>(StandardNormal)));
        let t = mce_threshold(&v, DEFAULT_SEPARATION);
        assert!(t.threshold > 1.5 && t.threshold < 9.5);
        let correct = v
            .iter()
            .enumerate()
            .filter(|(i, &x)| (x >= t.threshold) == (*i >= 500))
            .count();
        assert!(correct as f64 >= 0.99 * v.len() as f64);
    }

    #[test]
    fn single_half_normal_population_is_not_separable() {
        let mut rng = substream(9, 0);
        let v: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect();
        assert!(!mce_threshold(&v, DEFAULT_SEPARATION).separable);
    }

    #[test]
    fn metrics_definitions() {
        let m = Metrics::from_flags(&[true, true, false, false], &[true, false, true, false]);
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (1, 1, 1, 1));
        assert_relative_eq!(m.f1, 0.5);
        let m = Metrics::from_flags(&[false, true, true], &[false, true, true]);
        assert_eq!(m.f1, 1.0);
        let m = Metrics::from_flags(&[false, false], &[false, false]);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.positives(), 0);
    }

    #[test]
    fn clean_scores_have_noise_variance() {
        let case = crate::case::parse_matpower_case(include_str!("../fixtures/case14.m")).unwrap();
        let g = build_graph(&case);
        let basis = minimum_cycle_basis(&g, None).unwrap();
        let train = series(&case, 0.0, 200, 4);
        let bank = fit_bank(&train, &basis).unwrap();
        assert_eq!(bank.detectors.len(), 7);

        let test = series(&case, 0.02, 5000, 6);
        let s = score(&bank, &test).unwrap();
        for row in s.row_iter() {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            assert!((ms / 4e-4 - 1.0).abs() < 0.1, "{ms}");
        }
        let agg = aggregate(&s);
        for t in 0..agg.len() {
            let sum: f64 = s.column(t).iter().map(|v| v * v).sum();
            assert!((agg[t] * agg[t] - sum).abs() <= 1e-12 * sum.max(1.0));
        }

        let clean = series(&case, 0.0, 50, 7);
        let s = score(&bank, &clean).unwrap();
        assert!(s.max() <= 1e-10 * clean.amax());
        for d in &bank.detectors {
            let n = d.embedded(case.n_branches());
            assert!((train.transpose() * n).norm() <= 1e-10 * train.norm());
        }
        assert_eq!(fit_bank(&train, &basis).unwrap(), bank);
    }

    #[test]
    fn detect_flags_shifted_window() {
        let case = triangle();
        let basis = minimum_cycle_basis(&build_graph(&case), None).unwrap();
        let train = series(&case, 0.01, 100, 1);
        let bank = fit_bank(&train, &basis).unwrap();
        let mut test = series(&case, 0.01, 300, 2);
        let n = bank.detectors[0].embedded(3);
        let mut labels = vec![false; 300];
        for t in 100..200 {
            let mut col = test.column_mut(t);
            col += &n * 0.2;
            labels[t] = true;
        }
        let report = detect(&bank, &test, &labels, &DetectOptions::default()).unwrap();
        assert!(report.metrics().f1 > 0.95);
        assert_eq!(report.per_cycle.len(), 1);
        assert!(report.scores_csv().starts_with("t,label,cycle_0,aggregate\n0,0,"));
        let json: serde_json::Value = serde_json::from_str(&report.summary_json("s.csv")).unwrap();
        assert!(json["metrics"]["f1"].as_f64().unwrap() > 0.95);

        // thresholds frozen from a clean calibration trace
        let opts = DetectOptions {
            calibration: Some(series(&case, 0.01, 200, 5)),
            ..DetectOptions::default()
        };
        let frozen = detect(&bank, &test, &labels, &opts).unwrap();
        assert_eq!(frozen.aggregate.scores, report.aggregate.scores);
    }

    #[test]
    fn gating_suppresses_inseparable_traces() {
        let case = triangle();
        let basis = minimum_cycle_basis(&build_graph(&case), None).unwrap();
        let bank = fit_bank(&series(&case, 0.01, 100, 1), &basis).unwrap();
        let test = series(&case, 0.01, 300, 2);
        let labels = vec![false; 300];
        let plain = detect(&bank, &test, &labels, &DetectOptions::default()).unwrap();
        assert!(!plain.aggregate.threshold.separable);
        assert!(plain.aggregate.flags.iter().any(|&f| f));
        assert_eq!(plain.metrics().positives(), 0);
        let gated = DetectOptions { gate_on_separability: true, ..DetectOptions::default() };
        let gated = detect(&bank, &test, &labels, &gated).unwrap();
        assert!(gated.aggregate.flags.iter().all(|&f| !f));
    }

    #[test]
    fn svd_baseline_shape() {
        let case = crate::case::parse_matpower_case(include_str!("../fixtures/case14.m")).unwrap();
        let train = series(&case, 0.0, 100, 1);
        let model = SvdBaseline::fit(&train, 13).unwrap();
        assert_eq!(model.null_basis.ncols(), 7);
        let test = series(&case, 0.0, 20, 2);
        assert!(model.score(&test).iter().all(|&s| s < 1e-9));
        assert!(SvdBaseline::fit(&series(&case, 0.0, 10, 1), 13).is_err());
    }

    #[test]
    fn masking_triangle_edge_leaves_nothing_observable() {
        let g = build_graph(&triangle());
        let masked = mask_observability(&g, &[1]).unwrap();
        assert!(masked.basis.is_empty());
        assert_eq!(masked.classify(&[0, 1, 2]), SupportClass::InMissingCyclesOnly);
    }

    #[test]
    fn masking_fourteen_bus() {
        let case = crate::case::parse_matpower_case(include_str!("../fixtures/case14.m")).unwrap();
        let g = build_graph(&case);
        let mcb = minimum_cycle_basis(&g, None).unwrap();
        let largest = mcb.cycles.iter().max_by_key(|c| c.len()).unwrap();
        // an edge used by no other basis cycle
        let e = *largest
            .edge_ids()
            .iter()
            .find(|e| mcb.cycles.iter().filter(|c| c.contains(**e)).count() == 1)
            .unwrap();
        let masked = mask_observability(&g, &[e]).unwrap();
        assert_eq!(masked.basis.len(), 6);
        assert!(masked.basis.cycles.iter().all(|c| !c.contains(e)));
        assert_eq!(masked.classify(&[e]), SupportClass::InMissingCyclesOnly);
        let all: Vec<usize> = (0..g.n_edges()).collect();
        assert_eq!(masked.classify(&all), SupportClass::Mixed);
        let covered = masked.covered_branches();
        assert_eq!(masked.classify(&covered), SupportClass::InRemainingCycles);
        let _ = fundamental_cycle_basis(&g);
    }
}
