//! Divergence penalties as functions of `log α`.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tensor, Var};
use crate::ctensor::RTensor;
use crate::dist::{dawson_unchecked, log_minus_ei, sigmoid, softplus, EULER_GAMMA};
use crate::error::{Error, Result};

/// Prior family behind a layer's penalty. The first letter tells the weight
/// field: `C*` and `Rscale` layers are complex, `R*` layers are real.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PenaltyKind {
    /// Complex variational dropout, `log(1/α) - Ei(-1/α) + γ`.
    Cvd,
    /// Complex ARD, `log(1 + 1/α)`.
    Card,
    /// Real variational dropout (sigmoid approximation).
    Rvd,
    /// Real ARD, `½ log(1 + 1/α)`.
    Rard,
    /// Complex weights with real multiplicative noise; same form as `Rvd`.
    Rscale,
}

impl PenaltyKind {
    pub const ALL: [PenaltyKind; 5] = [Self::Cvd, Self::Card, Self::Rvd, Self::Rard, Self::Rscale];

    pub fn is_complex(self) -> bool {
        matches!(self, Self::Cvd | Self::Card | Self::Rscale)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cvd => "cvd",
            Self::Card => "card",
            Self::Rvd => "rvd",
            Self::Rard => "rard",
            Self::Rscale => "rscale",
        }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown penalty kind `{s}`")))
    }
}

/// Penalty kind plus the sigmoid-approximation constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    /// Back-propagate the Dawson-integral derivative instead of the
    /// approximation's own gradient (`Rvd`/`Rscale` only).
    pub exact_grad: bool,
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind) -> Self {
        Self {
            kind,
            k1: 0.63576,
            k2: 1.8732,
            k3: 1.48695,
            exact_grad: false,
        }
    }

    pub fn with_exact_grad(mut self, on: bool) -> Self {
        self.exact_grad = on;
        self
    }

    /// Per-weight penalty at `la = log α`.
    pub fn value(&self, la: f64) -> f64 {
        match self.kind {
            PenaltyKind::Cvd => log_minus_ei((-la).exp()) + EULER_GAMMA,
            PenaltyKind::Card => softplus(-la),
            PenaltyKind::Rard => 0.5 * softplus(-la),
            PenaltyKind::Rvd | PenaltyKind::Rscale => {
                0.5 * softplus(-la) + self.k1 * sigmoid(-(self.k2 + self.k3 * la))
            }
        }
    }

    /// Derivative of [`value`](Self::value) with respect to `log α`.
    pub fn approx_derivative(&self, la: f64) -> f64 {
        match self.kind {
            PenaltyKind::Cvd => (-(-la).exp()).exp_m1(),
            PenaltyKind::Card => -sigmoid(-la),
            PenaltyKind::Rard => -0.5 * sigmoid(-la),
            PenaltyKind::Rvd | PenaltyKind::Rscale => {
                let s = sigmoid(-(self.k2 + self.k3 * la));
                -0.5 * sigmoid(-la) - self.k1 * self.k3 * s * (1.0 - s)
            }
        }
    }

    /// The derivative used in back-propagation.
    pub fn derivative(&self, la: f64) -> f64 {
        match self.kind {
            PenaltyKind::Rvd | PenaltyKind::Rscale if self.exact_grad => rvd_exact_derivative(la),
            _ => self.approx_derivative(la),
        }
    }

    /// Summed penalty node over a real `log α` tensor.
    pub fn apply<'t>(&self, log_alpha: Var<'t>) -> Result<Var<'t>> {
        let v = log_alpha.value();
        let la = v.as_real()?;
        if let Some(bad) = la.data().iter().find(|x| !x.is_finite()) {
            return Err(Error::Domain {
                what: "penalty log alpha",
                value: *bad,
                expected: "finite",
            });
        }
        let total: f64 = la.data().iter().map(|&x| self.value(x)).sum();
        let spec = *self;
        let id = log_alpha.id();
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let g = g.as_real()?.data()[0];
            let la = v.as_real()?;
            let d = la.data().iter().map(|&x| g * spec.derivative(x)).collect();
            Ok(vec![(
                id,
                Tensor::Real(RTensor::new(la.shape().to_vec(), d)?),
            )])
        });
        Ok(log_alpha
            .tape()
            .custom(Tensor::Real(RTensor::scalar(total)), &[log_alpha], backward))
    }
}

/// Exact `log α`-derivative of the real improper-prior divergence,
/// `-x F(x)` with `x = 1/√(2α)` and `F` the Dawson integral.
pub fn rvd_exact_derivative(la: f64) -> f64 {
    let x = (-0.5 * la).exp() * std::f64::consts::FRAC_1_SQRT_2;
    -x * dawson_unchecked(x)
}
