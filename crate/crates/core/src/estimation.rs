//! Weighted-least-squares state estimation and χ² bad-data detection.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{JacobianH, NoiseModel};

#[derive(Debug, Clone, PartialEq)]
pub struct WlsEstimate {
    pub x_hat: DVector<f64>,
    pub z_hat: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub lnr: f64,
    pub dof: usize,
    pub threshold: f64,
    pub flagged: bool,
}

/// Precomputed WLS operators for one `(H, R)` pair.
#[derive(Debug, Clone)]
pub struct WlsEstimator {
    h: DMatrix<f64>,
    /// `(HᵀR⁻¹H)⁻¹ HᵀR⁻¹`
    pinv: DMatrix<f64>,
    sensitivity: DMatrix<f64>,
    inv_var: DVector<f64>,
}

impl WlsEstimator {
    pub fn new(h: &JacobianH, noise: &NoiseModel) -> Result<Self> {
        let m = h.m();
        if noise.m() != m {
            return Err(Error::Dimension(format!(
                "noise model has {} channels, H has {m} rows",
                noise.m()
            )));
        }
        if !noise.is_positive() {
            return Err(Error::InvalidParameter(
                "WLS needs strictly positive noise variances".into(),
            ));
        }
        let inv_var = DVector::from_iterator(m, noise.variances().into_iter().map(|v| 1.0 / v));
        let mut ht_rinv = h.matrix.transpose();
        for (e, mut col) in ht_rinv.column_iter_mut().enumerate() {
            col *= inv_var[e];
        }
        let gain = &ht_rinv * &h.matrix;
        let chol = gain
            .cholesky()
            .ok_or_else(|| Error::Singular("gain matrix HᵀR⁻¹H is singular".into()))?;
        let pinv = chol.solve(&ht_rinv);
        let sensitivity = DMatrix::identity(m, m) - &h.matrix * &pinv;
        Ok(WlsEstimator {
            h: h.matrix.clone(),
            pinv,
            sensitivity,
            inv_var,
        })
    }

    pub fn estimate(&self, z: &DVector<f64>) -> WlsEstimate {
        let x_hat = &self.pinv * z;
        let z_hat = &self.h * &x_hat;
        WlsEstimate { x_hat, z_hat }
    }

    /// Residual sensitivity `S = I - H(HᵀR⁻¹H)⁻¹HᵀR⁻¹`.
    pub fn sensitivity(&self) -> &DMatrix<f64> {
        &self.sensitivity
    }

    pub fn dof(&self) -> usize {
        self.h.nrows() - self.h.ncols()
    }

    /// `Σ (S z)ᵢ² / σᵢ²`.
    pub fn lnr(&self, z: &DVector<f64>) -> f64 {
        let r = &self.sensitivity * z;
        r.iter().zip(self.inv_var.iter()).map(|(r, w)| r * r * w).sum()
    }

    /// LNR of every column of `z`.
    pub fn lnr_series(&self, z: &DMatrix<f64>) -> Vec<f64> {
        let r = &self.sensitivity * z;
        r.column_iter()
            .map(|c| c.iter().zip(self.inv_var.iter()).map(|(r, w)| r * r * w).sum())
            .collect()
    }

    pub fn detect(&self, z: &DVector<f64>, alpha: f64) -> Result<ResidualStats> {
        let threshold = chi2_threshold(self.dof(), alpha)?;
        let lnr = self.lnr(z);
        Ok(ResidualStats {
            lnr,
            dof: self.dof(),
            threshold,
            flagged: lnr >= threshold,
        })
    }

    pub fn detect_series(&self, z: &DMatrix<f64>, alpha: f64) -> Result<Vec<ResidualStats>> {
        let threshold = chi2_threshold(self.dof(), alpha)?;
        let dof = self.dof();
        Ok(self
            .lnr_series(z)
            .into_iter()
            .map(|lnr| ResidualStats {
                lnr,
                dof,
                threshold,
                flagged: lnr >= threshold,
            })
            .collect())
    }
}

pub fn wls_estimate(h: &JacobianH, noise: &NoiseModel, z: &DVector<f64>) -> Result<WlsEstimate> {
    Ok(WlsEstimator::new(h, noise)?.estimate(z))
}

pub fn sensitivity_matrix(h: &JacobianH, noise: &NoiseModel) -> Result<DMatrix<f64>> {
    Ok(WlsEstimator::new(h, noise)?.sensitivity)
}

pub fn bdd_detect(h: &JacobianH, noise: &NoiseModel, z: &DVector<f64>, alpha: f64) -> Result<ResidualStats> {
    WlsEstimator::new(h, noise)?.detect(z, alpha)
}

/// Per-timestep rows `t,lnr,threshold,flagged`.
pub fn residual_report_csv(stats: &[ResidualStats]) -> String {
    let mut out = String::from("t,lnr,threshold,flagged\n");
    for (t, s) in stats.iter().enumerate() {
        let _ = writeln!(out, "{t},{},{},{}", s.lnr, s.threshold, u8::from(s.flagged));
    }
    out
}

// ---------------------------------------------------------------------------
// χ² distribution
// ---------------------------------------------------------------------------

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefactor = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // series
        let mut sum = 1.0 / a;
        let mut term = sum;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum.ln() + log_prefactor).exp()
    } else {
        // continued fraction for Q, modified Lentz
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        1.0 - (log_prefactor.exp() * h)
    }
}

pub fn chi2_cdf(x: f64, dof: usize) -> f64 {
    gamma_p(dof as f64 / 2.0, x / 2.0)
}

/// `χ²_{dof, 1-α}` by bisection on the CDF.
pub fn chi2_threshold(dof: usize, alpha: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::InvalidParameter("χ² needs at least one degree of freedom".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside (0, 1)")));
    }
    let target = 1.0 - alpha;
    let mut hi = dof as f64 + 10.0;
    while chi2_cdf(hi, dof) < target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, dof) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::sim::build_h;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn triangle_h() -> JacobianH {
        JacobianH {
            matrix: DMatrix::from_row_slice(3, 2, &[-10.0, 0.0, 5.0, -5.0, 0.0, 10.0 / 3.0]),
            state_buses: vec![1, 2],
        }
    }

    fn random_h(rng: &mut impl Rng, m: usize, n: usize) -> JacobianH {
        JacobianH {
            matrix: DMatrix::from_fn(m, n, |_, _| rng.sample(StandardNormal)),
            state_buses: (1..=n).collect(),
        }
    }

    #[test]
    fn recovers_generating_state() {
        let h = triangle_h();
        let x0 = DVector::from_vec(vec![0.01, 0.0]);
        let z = &h.matrix * &x0;
        let est = wls_estimate(&h, &NoiseModel::homoscedastic(3, 0.02).unwrap(), &z).unwrap();
        assert_relative_eq!(est.x_hat, x0, epsilon = 1e-14);
        assert_relative_eq!(est.z_hat, z, epsilon = 1e-14);
    }

    #[test]
    fn matches_normal_equations_oracle() {
        let mut rng = substream(3, 0);
        for _ in 0..20 {
            let h = random_h(&mut rng, 9, 4);
            let sigma: Vec<f64> = (0..9).map(|_| rng.random_range(0.01..0.1)).collect();
            let noise = NoiseModel::new(sigma.clone()).unwrap();
            let z = DVector::from_fn(9, |_, _| rng.sample(StandardNormal));
            // whiten and solve by QR, independently of the estimator's Cholesky
            let mut a = h.matrix.clone();
            let mut b = z.clone();
            for i in 0..9 {
                a.row_mut(i).unscale_mut(sigma[i]);
                b[i] /= sigma[i];
            }
            let qr = a.qr();
            let oracle = qr.r().solve_upper_triangular(&(qr.q().transpose() * b)).unwrap();
            let est = wls_estimate(&h, &noise, &z).unwrap();
            assert_relative_eq!(est.x_hat, oracle, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn wls_is_a_local_minimum() {
        let mut rng = substream(4, 0);
        let h = random_h(&mut rng, 8, 3);
        let noise = NoiseModel::new((0..8).map(|i| 0.01 + 0.01 * i as f64).collect()).unwrap();
        let z = DVector::from_fn(8, |_, _| rng.sample(StandardNormal));
        let est = wls_estimate(&h, &noise, &z).unwrap();
        let cost = |x: &DVector<f64>| {
            let r = &z - &h.matrix * x;
            r.iter().zip(&noise.sigma).map(|(r, s)| (r / s).powi(2)).sum::<f64>()
        };
        let base = cost(&est.x_hat);
        for _ in 0..50 {
            let d = DVector::from_fn(3, |_, _| 1e-4 * rng.sample::<f64, _>(StandardNormal));
            assert!(cost(&(&est.x_hat + d)) >= base);
        }
    }

    #[test]
    fn sensitivity_identities() {
        let mut rng = substream(5, 0);
        let h = random_h(&mut rng, 10, 4);
        let homo = NoiseModel::homoscedastic(10, 0.02).unwrap();
        let s = sensitivity_matrix(&h, &homo).unwrap();
        assert!((&s * &h.matrix).norm() < 1e-10);
        assert!((&s * &s - &s).norm() < 1e-10);
        assert_relative_eq!(s.trace(), 6.0, epsilon = 1e-10);

        let hetero = NoiseModel::new((0..10).map(|i| 0.01 * (1 + i) as f64).collect()).unwrap();
        let s = sensitivity_matrix(&h, &hetero).unwrap();
        for _ in 0..100 {
            let u = DVector::from_fn(4, |_, _| rng.sample(StandardNormal));
            assert!((&s * (&h.matrix * u)).norm() < 1e-10);
        }
        assert!((&s * &s - &s).norm() < 1e-10);
    }

    #[test]
    fn rank_deficient_h_is_singular() {
        let h = JacobianH {
            matrix: DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]),
            state_buses: vec![1, 2],
        };
        let err = WlsEstimator::new(&h, &NoiseModel::homoscedastic(3, 0.1).unwrap()).unwrap_err();
        assert!(err.is_numerical());
        assert!(WlsEstimator::new(&triangle_h(), &NoiseModel::homoscedastic(3, 0.0).unwrap()).is_err());
    }

    #[test]
    fn chi2_threshold_values() {
        assert_relative_eq!(chi2_threshold(7, 0.05).unwrap(), 14.067140449340169, epsilon = 1e-9);
        assert_relative_eq!(chi2_threshold(1, 0.3173105078629141).unwrap(), 1.0, epsilon = 1e-9);
        assert!(chi2_threshold(3, 1.0 - 1e-12).unwrap() < 1e-3);
        assert!(chi2_threshold(3, 0.0).is_err());
        assert!(chi2_threshold(3, 1.0).is_err());
        assert!(chi2_threshold(0, 0.05).is_err());
    }

    #[test]
    fn chi2_cdf_matches_independent_oracle() {
        for dof in [1usize, 2, 3, 7, 13, 40, 110] {
            let dist = ChiSquared::new(dof as f64).unwrap();
            for x in [0.01, 0.5, 1.0, 3.3, 7.0, 14.0, 30.0, 80.0, 150.0] {
                assert!((chi2_cdf(x, dof) - dist.cdf(x)).abs() < 1e-12, "dof {dof} x {x}");
            }
            for alpha in [0.001, 0.01, 0.05, 0.3, 0.9] {
                let tau = chi2_threshold(dof, alpha).unwrap();
                assert!((chi2_cdf(tau, dof) - (1.0 - alpha)).abs() <= 1e-10);
                assert!((dist.cdf(tau) - (1.0 - alpha)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn noise_free_and_model_based_lnr() {
        let case = crate::sim::tests::triangle_case([0.0, 0.3, 0.2]);
        let h = build_h(&case);
        let noise = NoiseModel::homoscedastic(3, 0.02).unwrap();
        let est = WlsEstimator::new(&h, &noise).unwrap();
        let z = &h.matrix * DVector::from_vec(vec![0.02, -0.01]);
        let stats = est.detect(&z, 0.05).unwrap();
        assert!(stats.lnr < 1e-20);
        assert!(!stats.flagged);

        let z = DVector::from_vec(vec![0.1, -0.3, 0.2]);
        let base = est.lnr(&z);
        let mut rng = substream(1, 1);
        for _ in 0..20 {
            let u = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            assert!((est.lnr(&(&z + &h.matrix * u)) - base).abs() <= 1e-8 * base.max(1.0));
        }
    }

    #[test]
    fn report_csv_rows() {
        let stats = [ResidualStats { lnr: 1.5, dof: 7, threshold: 14.0, flagged: false }];
        assert_eq!(residual_report_csv(&stats), "t,lnr,threshold,flagged\n0,1.5,14,0\n");
    }
}
