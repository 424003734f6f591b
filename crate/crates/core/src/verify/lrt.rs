//! Moment comparison between local reparameterization and explicit weight
//! sampling on a fixed 4×6 layer.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{ParamStore, Tape, Tensor};
use crate::ctensor::{CTensor, RTensor};
use crate::error::{Error, Result};
use crate::varlayers::{Mode, PenaltyKind, PenaltySpec, VarLayer};

use super::allowed_exceedances;

const N_IN: usize = 6;
const N_OUT: usize = 4;
const Z_MAX: f64 = 3.0;

#[derive(Clone, Copy, Debug)]
pub struct LrtConfig {
    pub samples: usize,
    pub seed: u64,
    /// `Cvd` (circular posterior) or `Rscale` (real multiplicative noise).
    pub penalty: PenaltyKind,
    /// Force every variance to exactly zero.
    pub zero_variance: bool,
}

impl Default for LrtConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            seed: 0,
            penalty: PenaltyKind::Cvd,
            zero_variance: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrtCheck {
    pub name: String,
    pub estimate: f64,
    pub expected: f64,
    pub se: f64,
}

impl LrtCheck {
    pub fn z(&self) -> f64 {
        if self.se == 0.0 {
            if self.estimate == self.expected {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.estimate - self.expected) / self.se
        }
    }

    pub fn ok(&self) -> bool {
        self.z().abs() <= Z_MAX
    }
}

#[derive(Clone, Debug)]
pub struct LrtReport {
    pub penalty: PenaltyKind,
    pub samples: usize,
    pub checks: Vec<LrtCheck>,
    /// With zero variance: every LRT output equals the deterministic forward bit for bit.
    pub exact_zero_variance: Option<bool>,
    /// Largest `|relation|` among the analytic per-output relations.
    pub max_relation: f64,
}

impl LrtReport {
    pub fn failures(&self) -> impl Iterator<Item = &LrtCheck> {
        self.checks.iter().filter(|c| !c.ok())
    }

    pub fn exceedances(&self) -> usize {
        self.failures().count()
    }

    /// Exceedances tolerated across all checks; see [`allowed_exceedances`].
    pub fn allowed(&self) -> usize {
        allowed_exceedances(self.checks.len())
    }

    pub fn passed(&self) -> bool {
        self.exceedances() <= self.allowed() && self.exact_zero_variance.unwrap_or(true)
    }

    pub fn max_abs_z(&self) -> f64 {
        self.checks.iter().map(|c| c.z().abs()).fold(0.0, f64::max)
    }
}

struct Fixture {
    store: ParamStore,
    layer: VarLayer,
    x: Vec<Complex64>,
    mu: Vec<Complex64>,
    /// Per-weight `σ²`; for `Rscale` this is `α`.
    s2: Vec<f64>,
    bias: Vec<Complex64>,
}

fn fixture(cfg: &LrtConfig) -> Result<Fixture> {
    if !matches!(
        cfg.penalty,
        PenaltyKind::Cvd | PenaltyKind::Card | PenaltyKind::Rscale
    ) {
        return Err(Error::InvalidArgument(format!(
            "LRT check needs a complex layer, got `{}`",
            cfg.penalty
        )));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut layer = VarLayer::linear(
        &mut store,
        "lrt",
        N_IN,
        N_OUT,
        PenaltySpec::new(cfg.penalty),
        &mut rng,
    );
    let mu: Vec<Complex64> = (0..N_IN * N_OUT)
        .map(|k| Complex64::new((0.7 * k as f64 + 0.3).sin(), (1.3 * k as f64).cos() * 0.8))
        .collect();
    let bias: Vec<Complex64> = (0..N_OUT)
        .map(|j| Complex64::new(0.1 * j as f64, -0.05 * j as f64))
        .collect();
    // log α between -2 and 1 across the weights.
    let la: Vec<f64> = (0..N_IN * N_OUT)
        .map(|k| -2.0 + 3.0 * k as f64 / (N_IN * N_OUT - 1) as f64)
        .collect();
    let log_slot: Vec<f64> = la
        .iter()
        .zip(&mu)
        .map(|(&a, m)| match (cfg.zero_variance, cfg.penalty) {
            (true, _) => -800.0,
            (false, PenaltyKind::Rscale) => a,
            (false, _) => a + m.norm_sqr().ln(),
        })
        .collect();
    let s2 = log_slot.iter().map(|v| v.exp()).collect();
    let split = |v: &[Complex64], shape: Vec<usize>| {
        CTensor::new(
            shape,
            v.iter().map(|c| c.re).collect(),
            v.iter().map(|c| c.im).collect(),
        )
    };
    store
        .get_mut(layer.mu)
        .set_value(split(&mu, vec![N_OUT, N_IN])?.into())?;
    store
        .get_mut(layer.bias)
        .set_value(split(&bias, vec![N_OUT])?.into())?;
    store
        .get_mut(layer.log_sigma2)
        .set_value(RTensor::new(vec![N_OUT, N_IN], log_slot)?.into())?;
    layer.set_mode(Mode::Stochastic)?;
    let x = (0..N_IN)
        .map(|i| Complex64::new(0.5 + 0.2 * i as f64, 0.3 - 0.15 * i as f64))
        .collect();
    Ok(Fixture {
        store,
        layer,
        x,
        mu,
        s2,
        bias,
    })
}

/// `[samples, N_OUT]` outputs through the layer's stochastic forward.
fn lrt_outputs(f: &Fixture, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Complex64>>> {
    let re: Vec<f64> = (0..n).flat_map(|_| f.x.iter().map(|c| c.re)).collect();
    let im: Vec<f64> = (0..n).flat_map(|_| f.x.iter().map(|c| c.im)).collect();
    let tape = Tape::new();
    let x = tape.constant(CTensor::new(vec![n, N_IN], re, im)?);
    let y = f.layer.forward(&tape, &f.store, x, rng)?.value();
    let y = y.as_complex()?;
    Ok((0..N_OUT)
        .map(|j| {
            (0..n)
                .map(|s| Complex64::new(y.re()[s * N_OUT + j], y.im()[s * N_OUT + j]))
                .collect()
        })
        .collect())
}

fn ws_outputs(
    f: &Fixture,
    kind: PenaltyKind,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Complex64>> {
    let mut out: Vec<Vec<Complex64>> = (0..N_OUT).map(|_| Vec::with_capacity(n)).collect();
    for _ in 0..n {
        for (j, col) in out.iter_mut().enumerate() {
            let mut y = f.bias[j];
            for i in 0..N_IN {
                let k = j * N_IN + i;
                let w = if kind == PenaltyKind::Rscale {
                    let e: f64 = rng.sample(StandardNormal);
                    f.mu[k] * (1.0 + f.s2[k].sqrt() * e)
                } else {
                    let (a, b): (f64, f64) =
                        (rng.sample(StandardNormal), rng.sample(StandardNormal));
                    f.mu[k] + Complex64::new(a, b) * (f.s2[k] / 2.0).sqrt()
                };
                y += w * f.x[i];
            }
            col.push(y);
        }
    }
    out
}

fn mean_se(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

struct Analytic {
    mean: Vec<Complex64>,
    var: Vec<f64>,
    rel: Vec<Complex64>,
}

fn analytic(f: &Fixture, kind: PenaltyKind) -> Analytic {
    let mut a = Analytic {
        mean: f.bias.clone(),
        var: vec![0.0; N_OUT],
        rel: vec![Complex64::new(0.0, 0.0); N_OUT],
    };
    for j in 0..N_OUT {
        for i in 0..N_IN {
            let k = j * N_IN + i;
            a.mean[j] += f.mu[k] * f.x[i];
            if kind == PenaltyKind::Rscale {
                let xm = f.x[i] * f.mu[k];
                a.var[j] += f.s2[k] * xm.norm_sqr();
                a.rel[j] += xm * xm * f.s2[k];
            } else {
                a.var[j] += f.s2[k] * f.x[i].norm_sqr();
            }
        }
    }
    a
}

/// Moment checks of one output sample set against the analytic values.
fn moment_checks(tag: &str, ys: &[Vec<Complex64>], a: &Analytic, checks: &mut Vec<LrtCheck>) {
    let mut push = |name: String, (estimate, se): (f64, f64), expected: f64| {
        checks.push(LrtCheck {
            name,
            estimate,
            expected,
            se,
        });
    };
    for (j, y) in ys.iter().enumerate() {
        let m = a.mean[j];
        push(
            format!("{tag} mean.re[{j}]"),
            mean_se(y.iter().map(|v| v.re)),
            m.re,
        );
        push(
            format!("{tag} mean.im[{j}]"),
            mean_se(y.iter().map(|v| v.im)),
            m.im,
        );
        push(
            format!("{tag} var[{j}]"),
            mean_se(y.iter().map(|v| (v - m).norm_sqr())),
            a.var[j],
        );
        let rel = || y.iter().map(|v| (v - m) * (v - m));
        push(
            format!("{tag} rel.re[{j}]"),
            mean_se(rel().map(|r| r.re)),
            a.rel[j].re,
        );
        push(
            format!("{tag} rel.im[{j}]"),
            mean_se(rel().map(|r| r.im)),
            a.rel[j].im,
        );
    }
    for j in 0..N_OUT {
        for k in j + 1..N_OUT {
            let (mj, mk) = (a.mean[j], a.mean[k]);
            let cov = || {
                ys[j]
                    .iter()
                    .zip(&ys[k])
                    .map(|(u, v)| (u - mj) * (v - mk).conj())
            };
            let pcov = || ys[j].iter().zip(&ys[k]).map(|(u, v)| (u - mj) * (v - mk));
            push(
                format!("{tag} cov.re[{j},{k}]"),
                mean_se(cov().map(|c| c.re)),
                0.0,
            );
            push(
                format!("{tag} cov.im[{j},{k}]"),
                mean_se(cov().map(|c| c.im)),
                0.0,
            );
            push(
                format!("{tag} pcov.re[{j},{k}]"),
                mean_se(pcov().map(|c| c.re)),
                0.0,
            );
            push(
                format!("{tag} pcov.im[{j},{k}]"),
                mean_se(pcov().map(|c| c.im)),
                0.0,
            );
        }
    }
}

pub fn verify_lrt(cfg: &LrtConfig) -> Result<LrtReport> {
    if cfg.samples < 10_000 {
        return Err(Error::InvalidArgument(format!(
            "need at least 1e4 samples, got {}",
            cfg.samples
        )));
    }
    let f = fixture(cfg)?;
    let a = analytic(&f, cfg.penalty);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lrt = lrt_outputs(&f, cfg.samples, &mut rng)?;
    let ws = ws_outputs(&f, cfg.penalty, cfg.samples, &mut rng);

    let mut checks = Vec::new();
    let exact_zero_variance = if cfg.zero_variance {
        let tape = Tape::new();
        let x = CTensor::new(
            vec![1, N_IN],
            f.x.iter().map(|c| c.re).collect(),
            f.x.iter().map(|c| c.im).collect(),
        )?;
        let mut det = f.layer.clone();
        det.set_mode(Mode::Deterministic)?;
        let y = det
            .forward(&tape, &f.store, tape.constant(x), &mut rng)?
            .value();
        let y: &Tensor = &y;
        let y = y.as_complex()?;
        Some((0..N_OUT).all(|j| {
            let d = Complex64::new(y.re()[j], y.im()[j]);
            lrt[j].iter().all(|v| *v == d)
        }))
    } else {
        moment_checks("lrt", &lrt, &a, &mut checks);
        moment_checks("weights", &ws, &a, &mut checks);
        // Direct comparison of the two estimators.
        for j in 0..N_OUT {
            let m = a.mean[j];
            let stat = |k: usize, v: &Complex64| match k {
                0 => v.re,
                1 => v.im,
                _ => (v - m).norm_sqr(),
            };
            for (k, name) in ["mean.re", "mean.im", "var"].into_iter().enumerate() {
                let (el, sl) = mean_se(lrt[j].iter().map(|v| stat(k, v)));
                let (ew, sw) = mean_se(ws[j].iter().map(|v| stat(k, v)));
                checks.push(LrtCheck {
                    name: format!("lrt-vs-weights {name}[{j}]"),
                    estimate: el - ew,
                    expected: 0.0,
                    se: (sl * sl + sw * sw).sqrt(),
                });
            }
        }
        None
    };
    Ok(LrtReport {
        penalty: cfg.penalty,
        samples: cfg.samples,
        checks,
        exact_zero_variance,
        max_relation: a.rel.iter().map(|r| r.norm()).fold(0.0, f64::max),
    })
}
