//! Monte-Carlo check of the divergence penalties and their derivatives over a
//! `log α` grid.
//!
//! Real VD: `K(α) = ½ E log (α^{-½} + ε)²`, `ε ~ N(0, 1)`.
//! Complex VD: `K(α) = E log |α^{-½} + z|² + γ`, `z ~ CN(0, 1, 0)`.
//! The same draws are reused at every grid point, so forward differences of
//! the estimate have small variance.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dist::EULER_GAMMA;
use crate::error::{Error, Result};
use crate::exec;
use crate::varlayers::{rvd_exact_derivative, PenaltyKind, PenaltySpec};

use super::allowed_exceedances;

const LA_RANGE: (f64, f64) = (-12.0, 12.0);
const CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug)]
pub struct KlConfig {
    pub grid: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self {
            grid: 1024,
            samples: 100_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlRow {
    pub log_alpha: f64,
    pub rvd_mc: f64,
    pub rvd_mc_se: f64,
    pub rvd_penalty: f64,
    pub rvd_exact_deriv: f64,
    pub rvd_approx_deriv: f64,
    pub rvd_rel_err: f64,
    /// Forward difference of the MC estimate towards the next grid point.
    pub rvd_fd: f64,
    pub rvd_fd_se: f64,
    pub cvd_mc: f64,
    pub cvd_mc_se: f64,
    pub cvd_penalty: f64,
    pub cvd_deriv: f64,
    /// Central difference of the implemented penalty.
    pub cvd_fd: f64,
}

#[derive(Clone, Debug)]
pub struct KlReport {
    pub rows: Vec<KlRow>,
    /// Largest relative error of the approximate derivative where `|exact| > 1e-4`.
    pub approx_max_rel_err: f64,
    /// Points where the forward difference is more than 3 SE from the exact derivative.
    pub fd_exceedances: usize,
    /// Exceedance count still consistent with chance (mean + 3 sd of the binomial count).
    pub fd_allowed: usize,
    pub fd_max_z: f64,
    pub cvd_offset_mean: f64,
    pub cvd_offset_std: f64,
    pub cvd_pooled_se: f64,
    /// Implemented complex penalty at the largest `α` of the grid.
    pub cvd_tail: f64,
    pub cvd_deriv_max_rel_err: f64,
}

impl KlReport {
    pub fn approx_ok(&self) -> bool {
        self.approx_max_rel_err < 0.04
    }

    pub fn fd_ok(&self) -> bool {
        self.fd_exceedances <= self.fd_allowed
    }

    pub fn cvd_offset_ok(&self) -> bool {
        self.cvd_offset_std < 3.0 * self.cvd_pooled_se
    }

    pub fn cvd_tail_ok(&self) -> bool {
        self.cvd_tail.abs() < 1e-3
    }

    pub fn cvd_deriv_ok(&self) -> bool {
        self.cvd_deriv_max_rel_err < 1e-6
    }

    pub fn passed(&self) -> bool {
        self.approx_ok()
            && self.fd_ok()
            && self.cvd_offset_ok()
            && self.cvd_tail_ok()
            && self.cvd_deriv_ok()
    }

    pub fn summary(&self) -> Vec<(String, bool)> {
        vec![
            (
                format!("real VD approximate derivative max rel. error {:.4} (< 0.04)", self.approx_max_rel_err),
                self.approx_ok(),
            ),
            (
                format!(
                    "MC forward difference vs exact derivative: {} of {} points beyond 3 SE (allowed {}), max |z| {:.2}",
                    self.fd_exceedances,
                    self.rows.len() - 1,
                    self.fd_allowed,
                    self.fd_max_z
                ),
                self.fd_ok(),
            ),
            (
                format!(
                    "complex VD penalty minus MC: mean {:.2e}, std {:.2e} (< 3 x pooled SE = {:.2e})",
                    self.cvd_offset_mean,
                    self.cvd_offset_std,
                    3.0 * self.cvd_pooled_se
                ),
                self.cvd_offset_ok(),
            ),
            (format!("complex VD penalty at largest alpha {:.2e} (|.| < 1e-3)", self.cvd_tail), self.cvd_tail_ok()),
            (
                format!("complex VD derivative vs central differences max rel. error {:.2e} (< 1e-6)", self.cvd_deriv_max_rel_err),
                self.cvd_deriv_ok(),
            ),
        ]
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "log_alpha",
            "rvd_mc",
            "rvd_mc_se",
            "rvd_penalty",
            "rvd_exact_deriv",
            "rvd_approx_deriv",
            "rvd_rel_err",
            "rvd_fd",
            "rvd_fd_se",
            "cvd_mc",
            "cvd_mc_se",
            "cvd_penalty",
            "cvd_deriv",
            "cvd_fd",
        ])?;
        for r in &self.rows {
            w.write_record(
                [
                    r.log_alpha,
                    r.rvd_mc,
                    r.rvd_mc_se,
                    r.rvd_penalty,
                    r.rvd_exact_deriv,
                    r.rvd_approx_deriv,
                    r.rvd_rel_err,
                    r.rvd_fd,
                    r.rvd_fd_se,
                    r.cvd_mc,
                    r.cvd_mc_se,
                    r.cvd_penalty,
                    r.cvd_deriv,
                    r.cvd_fd,
                ]
                .map(|v| v.to_string()),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sample mean and its standard error of `f(0..n)`, reduced in fixed-size chunks.
fn mean_se(n: usize, f: impl Fn(usize) -> f64 + Sync + Send) -> (f64, f64) {
    let parts = exec::map_range(n.div_ceil(CHUNK), |c| {
        (c * CHUNK..((c + 1) * CHUNK).min(n)).fold((0.0, 0.0), |(s, q), i| {
            let v = f(i);
            (s + v, q + v * v)
        })
    });
    let (s, q) = parts
        .iter()
        .fold((0.0, 0.0), |(a, b), (s, q)| (a + s, b + q));
    let nf = n as f64;
    let mean = s / nf;
    let var = ((q - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

pub fn grid(n: usize) -> Vec<f64> {
    let (lo, hi) = LA_RANGE;
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

pub fn verify_kl(cfg: &KlConfig) -> Result<KlReport> {
    if cfg.grid < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid needs at least 2 points, got {}",
            cfg.grid
        )));
    }
    if cfg.samples < 10_000 {
        return Err(Error::InvalidArgument(format!(
            "need at least 1e4 samples, got {}",
            cfg.samples
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps: Vec<f64> = (0..cfg.samples)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let z: Vec<(f64, f64)> = (0..cfg.samples)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            (
                a * std::f64::consts::FRAC_1_SQRT_2,
                b * std::f64::consts::FRAC_1_SQRT_2,
            )
        })
        .collect();
    let las = grid(cfg.grid);
    let h = las[1] - las[0];
    let rvd = PenaltySpec::new(PenaltyKind::Rvd);
    let cvd = PenaltySpec::new(PenaltyKind::Cvd);
    let real_term = |x: f64, e: f64| 0.5 * ((x + e) * (x + e)).ln();
    let inv_sqrt = |la: f64| (-0.5 * la).exp();

    let mut rows = Vec::with_capacity(las.len());
    for (i, &la) in las.iter().enumerate() {
        let x = inv_sqrt(la);
        let (rvd_mc, rvd_mc_se) = mean_se(cfg.samples, |s| real_term(x, eps[s]));
        let (rvd_fd, rvd_fd_se) = match las.get(i + 1) {
            Some(&next) => {
                let xn = inv_sqrt(next);
                mean_se(cfg.samples, |s| {
                    (real_term(xn, eps[s]) - real_term(x, eps[s])) / h
                })
            }
            None => (f64::NAN, f64::NAN),
        };
        let (cvd_mc, cvd_mc_se) = mean_se(cfg.samples, |s| {
            let (a, b) = z[s];
            ((x + a) * (x + a) + b * b).ln() + EULER_GAMMA
        });
        let exact = rvd_exact_derivative(la);
        let approx = rvd.approx_derivative(la);
        let d = 1e-4;
        rows.push(KlRow {
            log_alpha: la,
            rvd_mc,
            rvd_mc_se,
            rvd_penalty: rvd.value(la),
            rvd_exact_deriv: exact,
            rvd_approx_deriv: approx,
            rvd_rel_err: ((approx - exact) / exact).abs(),
            rvd_fd,
            rvd_fd_se,
            cvd_mc,
            cvd_mc_se,
            cvd_penalty: cvd.value(la),
            cvd_deriv: cvd.derivative(la),
            cvd_fd: (cvd.value(la + d) - cvd.value(la - d)) / (2.0 * d),
        });
    }

    let approx_max_rel_err = rows
        .iter()
        .filter(|r| r.rvd_exact_deriv.abs() > 1e-4)
        .map(|r| r.rvd_rel_err)
        .fold(0.0, f64::max);
    let zs: Vec<f64> = rows
        .iter()
        .filter(|r| r.rvd_fd.is_finite())
        .map(|r| ((r.rvd_fd - r.rvd_exact_deriv) / r.rvd_fd_se).abs())
        .collect();
    let fd_allowed = allowed_exceedances(zs.len());
    let offsets: Vec<f64> = rows.iter().map(|r| r.cvd_penalty - r.cvd_mc).collect();
    let n = offsets.len() as f64;
    let cvd_offset_mean = offsets.iter().sum::<f64>() / n;
    let cvd_offset_std = (offsets
        .iter()
        .map(|o| (o - cvd_offset_mean).powi(2))
        .sum::<f64>()
        / (n - 1.0))
        .sqrt();
    let cvd_pooled_se = (rows.iter().map(|r| r.cvd_mc_se * r.cvd_mc_se).sum::<f64>() / n).sqrt();
    let cvd_deriv_max_rel_err = rows
        .iter()
        .map(|r| ((r.cvd_fd - r.cvd_deriv) / r.cvd_deriv).abs())
        .fold(0.0, f64::max);
    Ok(KlReport {
        approx_max_rel_err,
        fd_exceedances: zs.iter().filter(|z| **z > 3.0).count(),
        fd_allowed,
        fd_max_z: zs.iter().copied().fold(0.0, f64::max),
        cvd_offset_mean,
        cvd_offset_std,
        cvd_pooled_se,
        cvd_tail: rows.last().map_or(f64::NAN, |r| r.cvd_penalty),
        cvd_deriv_max_rel_err,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_with_few_samples_passes() {
        let r = verify_kl(&KlConfig {
            grid: 1024,
            samples: 10_000,
            seed: 1,
        })
        .unwrap();
        assert_eq!(r.rows.len(), 1024);
        assert!(r.passed(), "{:#?}", r.summary());
        assert!(r.rows.last().unwrap().rvd_fd.is_nan());
    }

    #[test]
    fn mc_estimates_match_closed_forms() {
        // Complex log-moment has the closed form log(1/α) - Ei(-1/α); at α = 1 it is -Ei(-1) = 0.21938...
        let r = verify_kl(&KlConfig {
            grid: 3,
            samples: 200_000,
            seed: 2,
        })
        .unwrap();
        let mid = &r.rows[1];
        assert_eq!(mid.log_alpha, 0.0);
        let closed = 0.219_383_934_395_520_3 + EULER_GAMMA;
        assert!(
            (mid.cvd_mc - closed).abs() < 4.0 * mid.cvd_mc_se,
            "{} vs {closed}",
            mid.cvd_mc
        );
        assert!((mid.cvd_penalty - closed).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(verify_kl(&KlConfig {
            grid: 1,
            samples: 10_000,
            seed: 0
        })
        .is_err());
        assert!(verify_kl(&KlConfig {
            grid: 4,
            samples: 10,
            seed: 0
        })
        .is_err());
    }
}
