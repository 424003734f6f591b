//! Classifier architectures assembled from variational layers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Tensor, Var};
use crate::ctensor::{CTensor, RTensor};
use crate::error::{Error, Result};
use crate::pruning::{compute_masks, SparsityMask};
use crate::varlayers::{Mode, PenaltyKind, PenaltySpec, VarLayer};

/// Field of the network weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Real,
    Complex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Fully connected stack over flattened inputs.
    Dense,
    /// Two conv + average-pool blocks followed by two dense layers.
    Conv,
}

macro_rules! named_enum {
    ($t:ty, $what:literal, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok($v),)+
                    _ => Err(Error::InvalidArgument(format!(concat!("unknown ", $what, " `{}`"), s))),
                }
            }
        }
    };
}

named_enum!(ModelKind, "model kind", ModelKind::Real => "real", ModelKind::Complex => "complex");
named_enum!(Arch, "architecture", Arch::Dense => "dense", Arch::Conv => "conv");

/// How complex features are fed to a real network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RealInput {
    /// Real parts only (the imaginary part of raw features is zero).
    RealPart,
    /// Real and imaginary parts side by side (dense) or as two channels (conv).
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub arch: Arch,
    pub width: f64,
    pub penalty: PenaltySpec,
    /// Image height and width.
    pub input: (usize, usize),
    pub n_classes: usize,
    /// Hidden widths of the dense architecture before scaling.
    pub hidden: Vec<usize>,
    pub real_input: RealInput,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let complex = self.kind == ModelKind::Complex;
        if self.penalty.kind.is_complex() != complex {
            return Err(Error::InvalidArgument(format!(
                "penalty `{}` does not apply to a {} model",
                self.penalty.kind, self.kind
            )));
        }
        if !(self.width > 0.0) || self.n_classes < 2 || self.input.0 == 0 || self.input.1 == 0 {
            return Err(Error::InvalidArgument(
                "model sizes must be positive with at least two classes".into(),
            ));
        }
        if self.arch == Arch::Conv && (self.input.0 < 16 || self.input.1 < 16) {
            return Err(Error::InvalidArgument(
                "conv architecture needs inputs of at least 16×16".into(),
            ));
        }
        Ok(())
    }

    fn scaled(&self, n: usize) -> usize {
        ((n as f64 * self.width).round() as usize).max(1)
    }

    fn in_channels(&self) -> usize {
        match (self.kind, self.real_input) {
            (ModelKind::Real, RealInput::Both) => 2,
            _ => 1,
        }
    }
}

/// A classifier and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    layers: Vec<VarLayer>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let p = spec.penalty;
        let (h, w) = spec.input;
        let c = spec.in_channels();
        let mut layers = Vec::new();
        match spec.arch {
            Arch::Dense => {
                let mut fan = c * h * w;
                for (i, &n) in spec.hidden.iter().enumerate() {
                    let n = spec.scaled(n);
                    layers.push(VarLayer::linear(
                        &mut store,
                        &format!("fc{i}"),
                        fan,
                        n,
                        p,
                        rng,
                    ));
                    fan = n;
                }
                let i = spec.hidden.len();
                layers.push(VarLayer::linear(
                    &mut store,
                    &format!("fc{i}"),
                    fan,
                    spec.n_classes,
                    p,
                    rng,
                ));
            }
            Arch::Conv => {
                let (c1, c2, f1) = (spec.scaled(20), spec.scaled(50), spec.scaled(500));
                layers.push(VarLayer::conv2d(&mut store, "conv0", c, c1, 5, 1, p, rng));
                layers.push(VarLayer::conv2d(&mut store, "conv1", c1, c2, 5, 1, p, rng));
                let (h2, w2) = (((h - 4) / 2 - 4) / 2, ((w - 4) / 2 - 4) / 2);
                layers.push(VarLayer::linear(
                    &mut store,
                    "fc0",
                    c2 * h2 * w2,
                    f1,
                    p,
                    rng,
                ));
                layers.push(VarLayer::linear(
                    &mut store,
                    "fc1",
                    f1,
                    spec.n_classes,
                    p,
                    rng,
                ));
            }
        }
        Ok(Self {
            spec,
            store,
            layers,
        })
    }

    pub fn layers(&self) -> &[VarLayer] {
        &self.layers
    }

    pub fn set_mode(&mut self, mode: Mode) -> Result<()> {
        self.layers.iter_mut().try_for_each(|l| l.set_mode(mode))
    }

    pub fn mode(&self) -> Mode {
        self.layers[0].mode()
    }

    /// Converts a batch of complex features `[B, H, W]` into this model's input.
    pub fn prepare_input(&self, x: &CTensor) -> Result<Tensor> {
        let s = x.shape();
        let (h, w) = self.spec.input;
        if s.len() != 3 || s[1] != h || s[2] != w {
            return Err(Error::InvalidShape {
                op: "prepare_input",
                shape: s.to_vec(),
                reason: format!("expected [batch, {h}, {w}]"),
            });
        }
        let b = s[0];
        let conv = self.spec.arch == Arch::Conv;
        Ok(match self.spec.kind {
            ModelKind::Complex => {
                let shape = if conv {
                    vec![b, 1, h, w]
                } else {
                    vec![b, h * w]
                };
                x.clone().reshape(shape)?.into()
            }
            ModelKind::Real => match self.spec.real_input {
                RealInput::RealPart => {
                    let shape = if conv {
                        vec![b, 1, h, w]
                    } else {
                        vec![b, h * w]
                    };
                    x.real_part().reshape(shape)?.into()
                }
                RealInput::Both => {
                    let hw = h * w;
                    let mut data = Vec::with_capacity(2 * x.len());
                    for i in 0..b {
                        data.extend_from_slice(&x.re()[i * hw..(i + 1) * hw]);
                        data.extend_from_slice(&x.im()[i * hw..(i + 1) * hw]);
                    }
                    let shape = if conv {
                        vec![b, 2, h, w]
                    } else {
                        vec![b, 2 * hw]
                    };
                    RTensor::new(shape, data)?.into()
                }
            },
        })
    }

    /// Real logits `[B, classes]`; complex outputs contribute their real part.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
        rng: &mut R,
    ) -> Result<Var<'t>> {
        let mut h = tape.constant(x.clone());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            if self.spec.arch == Arch::Conv && i == 2 {
                h = h.flatten_batch()?;
            }
            h = layer.forward(tape, &self.store, h, rng)?;
            if i != last {
                h = h.relu();
                if self.spec.arch == Arch::Conv && i < 2 {
                    h = h.avg_pool2d(2, 2)?;
                }
            }
        }
        if h.value().is_complex() {
            h.real_part()
        } else {
            Ok(h)
        }
    }

    /// Sum of all layer penalties as a graph node.
    pub fn penalty_var<'t>(&self, tape: &'t Tape) -> Result<Var<'t>> {
        let mut total = self.layers[0].penalty_var(tape, &self.store)?;
        for l in &self.layers[1..] {
            total = total.add(l.penalty_var(tape, &self.store)?)?;
        }
        Ok(total)
    }

    pub fn penalty_value(&self) -> Result<f64> {
        self.layers
            .iter()
            .map(|l| l.penalty_value(&self.store))
            .sum()
    }

    pub fn compute_masks(&self, tau: f64) -> Result<SparsityMask> {
        let refs: Vec<&VarLayer> = self.layers.iter().collect();
        compute_masks(&refs, &self.store, tau)
    }

    /// Current masks, or all-retained masks for layers without one.
    pub fn current_masks(&self) -> SparsityMask {
        let refs: Vec<&VarLayer> = self.layers.iter().collect();
        let mut m = compute_masks(&refs, &self.store, f64::INFINITY).expect("model has layers");
        for (lm, layer) in m.layers.iter_mut().zip(&self.layers) {
            if let Some(k) = layer.mask() {
                lm.keep = k;
            }
        }
        crate::pruning::SparsityMask::new(m.layers, m.n_fixed)
    }

    pub fn apply_masks(&mut self, mask: &SparsityMask) -> Result<()> {
        if mask.layers.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "mask covers {} layers, model has {}",
                mask.layers.len(),
                self.layers.len()
            )));
        }
        for (layer, m) in self.layers.iter_mut().zip(&mask.layers) {
            layer.apply_mask(&mut self.store, &m.keep)?;
        }
        Ok(())
    }

    pub fn apply_layer_mask(&mut self, name: &str, keep: &[bool]) -> Result<()> {
        let layer = self
            .layers
            .iter_mut()
            .find(|l| l.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no layer named `{name}`")))?;
        layer.apply_mask(&mut self.store, keep)
    }

    pub fn reapply_masks(&mut self) {
        for l in &self.layers {
            l.reapply_mask(&mut self.store);
        }
    }

    pub fn reset_log_alpha(&mut self, la0: f64) -> Result<()> {
        self.layers
            .iter()
            .try_for_each(|l| l.reset_log_alpha(&mut self.store, la0))
    }

    pub fn clamp_log_sigma2(&mut self, lo: f64, hi: f64) {
        for l in &self.layers {
            l.clamp_log_sigma2(&mut self.store, lo, hi);
        }
    }
}

/// Shorthand used by tests and examples.
pub fn dense_spec(
    kind: PenaltyKind,
    input: (usize, usize),
    hidden: Vec<usize>,
    n_classes: usize,
) -> ModelSpec {
    ModelSpec {
        kind: if kind.is_complex() {
            ModelKind::Complex
        } else {
            ModelKind::Real
        },
        arch: Arch::Dense,
        width: 1.0,
        penalty: PenaltySpec::new(kind),
        input,
        n_classes,
        hidden,
        real_input: RealInput::RealPart,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(b: usize, h: usize, w: usize) -> CTensor {
        let n = b * h * w;
        CTensor::new(
            vec![b, h, w],
            (0..n).map(|i| (i as f64 * 0.37).sin()).collect(),
            (0..n).map(|i| (i as f64 * 0.11).cos()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn dense_and_conv_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [PenaltyKind::Cvd, PenaltyKind::Rard] {
            for arch in [Arch::Dense, Arch::Conv] {
                for real_input in [RealInput::RealPart, RealInput::Both] {
                    let spec = ModelSpec {
                        arch,
                        width: 0.5,
                        real_input,
                        ..dense_spec(kind, (28, 28), vec![32], 10)
                    };
                    let mut m = Model::new(spec, &mut rng).unwrap();
                    let x = m.prepare_input(&batch(3, 28, 28)).unwrap();
                    for mode in [Mode::Deterministic, Mode::Stochastic] {
                        m.set_mode(mode).unwrap();
                        let tape = Tape::new();
                        let y = m.forward(&tape, &x, &mut rng).unwrap();
                        assert_eq!(y.shape(), vec![3, 10]);
                        assert!(!y.value().is_complex());
                    }
                }
            }
        }
    }

    #[test]
    fn conv_widths_follow_multiplier() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = ModelSpec {
            arch: Arch::Conv,
            width: 0.5,
            ..dense_spec(PenaltyKind::Card, (28, 28), vec![], 10)
        };
        let m = Model::new(spec, &mut rng).unwrap();
        let shapes: Vec<Vec<usize>> = m
            .layers()
            .iter()
            .map(|l| m.store.value(l.mu).shape().to_vec())
            .collect();
        assert_eq!(
            shapes,
            vec![
                vec![10, 1, 5, 5],
                vec![25, 10, 5, 5],
                vec![250, 400],
                vec![10, 250]
            ]
        );
    }

    #[test]
    fn penalty_must_match_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = ModelSpec {
            kind: ModelKind::Real,
            ..dense_spec(PenaltyKind::Cvd, (4, 4), vec![], 2)
        };
        assert!(Model::new(spec, &mut rng).is_err());
    }

    #[test]
    fn masked_forward_matches_dense_forward_with_zeroed_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Model::new(dense_spec(PenaltyKind::Cvd, (4, 4), vec![6], 3), &mut rng).unwrap();
        let x = m.prepare_input(&batch(5, 4, 4)).unwrap();
        // Spread log α so that a threshold prunes a fraction.
        for l in m.layers().to_vec() {
            let n = m.store.value(l.log_sigma2).len();
            let shape = m.store.value(l.log_sigma2).shape().to_vec();
            let la: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
            let mu = m.store.value(l.mu).as_complex().unwrap().abs2();
            let ls = la.iter().zip(mu.data()).map(|(a, m)| a + m.ln()).collect();
            m.store
                .get_mut(l.log_sigma2)
                .set_value(RTensor::new(shape, ls).unwrap().into())
                .unwrap();
        }
        let mask = m.compute_masks(-0.5).unwrap();
        assert!(mask.n_zer > 0);
        let mut dense = m.clone();
        for (l, lm) in dense.layers.clone().iter().zip(&mask.layers) {
            for part in dense.store.get_mut(l.mu).value_mut().components_mut() {
                for (w, k) in part.iter_mut().zip(&lm.keep) {
                    if !k {
                        *w = 0.0;
                    }
                }
            }
        }
        m.apply_masks(&mask).unwrap();
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = m.forward(&t1, &x, &mut rng).unwrap().value();
        let b = dense.forward(&t2, &x, &mut rng).unwrap().value();
        assert_eq!(a, b);
        assert_eq!(m.current_masks(), mask);
    }
}
