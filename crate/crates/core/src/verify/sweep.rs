//! Finite-difference sweep over every layer/penalty pair and a few
//! compositions of the differentiable operations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{gradcheck, ParamStore, Tape, Tensor, Var};
use crate::ctensor::{CTensor, DftNorm, RTensor};
use crate::error::Result;
use crate::varlayers::{Mode, PenaltyKind, PenaltySpec, VarLayer};

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-5;

/// How the penalty's `log α` derivative is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivativePath {
    /// Closed-form derivative of the exact divergence.
    Exact,
    /// Derivative of a fitted approximation.
    Approx,
    /// No penalty involved.
    None,
}

impl DerivativePath {
    pub fn of(spec: &PenaltySpec) -> Self {
        match spec.kind {
            PenaltyKind::Rvd | PenaltyKind::Rscale if !spec.exact_grad => Self::Approx,
            _ => Self::Exact,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Approx => "approx",
            Self::None => "none",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub layer: String,
    pub penalty: Option<PenaltyKind>,
    pub derivative: DerivativePath,
    pub max_rel_err: f64,
}

impl SweepRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOL
    }
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(SweepRow::passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<28} {:<8} {:<10} {:>12} {}\n",
            "layer", "penalty", "derivative", "max_rel_err", "ok"
        );
        for r in &self.rows {
            let p = r.penalty.map_or("-", PenaltyKind::name);
            s.push_str(&format!(
                "{:<28} {:<8} {:<10} {:>12.3e} {}\n",
                r.layer,
                p,
                r.derivative.name(),
                r.max_rel_err,
                r.passed()
            ));
        }
        s
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn wave(n: usize, phase: f64, freq: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + phase) * freq).sin()).collect()
}

fn cinput(shape: Vec<usize>) -> CTensor {
    let n = shape.iter().product();
    CTensor::new(shape, wave(n, 0.5, 0.77), wave(n, 2.0, 1.31)).expect("sized")
}

fn input_for(complex: bool, shape: Vec<usize>) -> Tensor {
    let c = cinput(shape);
    if complex {
        c.into()
    } else {
        c.real_part().into()
    }
}

/// `Σ|y|²` (or `Σy²`) plus a scaled penalty through one stochastic layer.
fn layer_row(kind: PenaltyKind, conv: bool) -> Result<SweepRow> {
    let spec = PenaltySpec::new(kind);
    let mut store = ParamStore::new();
    let mut layer = if conv {
        VarLayer::conv2d(&mut store, "c", 2, 2, 2, 1, spec, &mut rng(5))
    } else {
        VarLayer::linear(&mut store, "l", 3, 2, spec, &mut rng(5))
    };
    layer.reset_log_alpha(&mut store, -1.0)?;
    store.get_mut(layer.bias).value_mut().components_mut()[0][0] = 0.3;
    layer.set_mode(Mode::Stochastic)?;
    let x = input_for(
        layer.is_complex(),
        if conv { vec![2, 2, 3, 3] } else { vec![4, 3] },
    );
    let rep = gradcheck(
        &mut store,
        |t, s| {
            let y = layer.forward(t, s, t.constant(x.clone()), &mut rng(11))?;
            let y = if layer.is_complex() {
                y.abs2()?
            } else {
                y.square()
            };
            y.sum().add(layer.penalty_var(t, s)?.scale(0.1))
        },
        EPS,
        TOL,
    )?;
    Ok(SweepRow {
        layer: if conv { "conv2d" } else { "linear" }.into(),
        penalty: Some(kind),
        derivative: DerivativePath::of(&spec),
        max_rel_err: rep.max_rel_err(),
    })
}

fn composition_row<F>(
    name: &str,
    kind: Option<PenaltyKind>,
    mut store: ParamStore,
    f: F,
) -> Result<SweepRow>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let rep = gradcheck(&mut store, f, EPS, TOL)?;
    Ok(SweepRow {
        layer: name.into(),
        penalty: kind,
        derivative: kind.map_or(DerivativePath::None, |k| {
            DerivativePath::of(&PenaltySpec::new(k))
        }),
        max_rel_err: rep.max_rel_err(),
    })
}

fn stochastic(mut layer: VarLayer, store: &mut ParamStore, la: f64) -> Result<VarLayer> {
    layer.reset_log_alpha(store, la)?;
    layer.set_mode(Mode::Stochastic)?;
    Ok(layer)
}

/// Centered DFT, complex convolution, planar ReLU and average pooling.
fn dft_conv_pool() -> Result<SweepRow> {
    let kind = PenaltyKind::Cvd;
    let mut store = ParamStore::new();
    let conv = VarLayer::conv2d(
        &mut store,
        "c",
        1,
        2,
        3,
        1,
        PenaltySpec::new(kind),
        &mut rng(7),
    );
    let conv = stochastic(conv, &mut store, -0.5)?;
    let img = cinput(vec![2, 1, 6, 6]);
    composition_row("dft>conv>relu>pool", Some(kind), store, move |t, s| {
        let x = t.constant(img.clone()).dft2d_centered(DftNorm::Ortho)?;
        let y = conv
            .forward(t, s, x, &mut rng(3))?
            .relu()
            .avg_pool2d(2, 2)?;
        y.abs2()?.sum().add(conv.penalty_var(t, s)?.scale(0.05))
    })
}

/// Convolution, pooling, dense layer and cross-entropy on the real part.
fn conv_dense_xent() -> Result<SweepRow> {
    let kind = PenaltyKind::Card;
    let spec = PenaltySpec::new(kind);
    let mut store = ParamStore::new();
    let conv = VarLayer::conv2d(&mut store, "c", 1, 2, 3, 1, spec, &mut rng(8));
    let conv = stochastic(conv, &mut store, -1.5)?;
    let fc = VarLayer::linear(&mut store, "fc", 8, 3, spec, &mut rng(9));
    let fc = stochastic(fc, &mut store, -1.5)?;
    let img = cinput(vec![3, 1, 6, 6]);
    composition_row("conv>pool>linear>xent", Some(kind), store, move |t, s| {
        let mut r = rng(4);
        let h = conv
            .forward(t, s, t.constant(img.clone()), &mut r)?
            .avg_pool2d(2, 2)?;
        let logits = fc.forward(t, s, h.flatten_batch()?, &mut r)?.real_part()?;
        let kl = conv.penalty_var(t, s)?.add(fc.penalty_var(t, s)?)?;
        logits.cross_entropy(&[0, 2, 1])?.add(kl.scale(0.01))
    })
}

/// Two-layer real network with the sigmoid-approximated penalty.
fn real_mlp() -> Result<SweepRow> {
    let kind = PenaltyKind::Rvd;
    let spec = PenaltySpec::new(kind);
    let mut store = ParamStore::new();
    let l0 = stochastic(
        VarLayer::linear(&mut store, "fc0", 5, 4, spec, &mut rng(1)),
        &mut store,
        -2.0,
    )?;
    let l1 = stochastic(
        VarLayer::linear(&mut store, "fc1", 4, 3, spec, &mut rng(2)),
        &mut store,
        -2.0,
    )?;
    let x: Tensor = RTensor::new(vec![4, 5], wave(20, 0.3, 0.9))
        .expect("sized")
        .into();
    composition_row("linear>relu>linear>xent", Some(kind), store, move |t, s| {
        let mut r = rng(6);
        let h = l0.forward(t, s, t.constant(x.clone()), &mut r)?.relu();
        let logits = l1.forward(t, s, h, &mut r)?;
        let kl = l0.penalty_var(t, s)?.add(l1.penalty_var(t, s)?)?;
        logits.cross_entropy(&[1, 0, 2, 1])?.add(kl.scale(0.02))
    })
}

/// One row per (layer, penalty) pair, then the compositions.
pub fn gradcheck_sweep() -> Result<SweepReport> {
    let mut rows = Vec::new();
    for conv in [false, true] {
        for kind in PenaltyKind::ALL {
            rows.push(layer_row(kind, conv)?);
        }
    }
    rows.push(dft_conv_pool()?);
    rows.push(conv_dense_xent()?);
    rows.push(real_mlp()?);
    Ok(SweepReport { rows })
}
